#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tract/pipeline.hpp"
#include "tract/predictors.hpp"

namespace tract {

struct DataSizes {
    int train = 2000;
    int test = 500;
    int pairs = 200;
    int pair_min_gap = 2;

    bool operator==(const DataSizes&) const = default;
};

void to_json(nlohmann::json& j, const DataSizes& d);
void from_json(const nlohmann::json& j, DataSizes& d);

struct SelfDataConfig {
    SamplingConfig sampling;
    int attempts = 3;
    std::uint64_t seed = 23;

    bool operator==(const SelfDataConfig&) const = default;
};

void to_json(nlohmann::json& j, const SelfDataConfig& c);
void from_json(const nlohmann::json& j, SelfDataConfig& c);

struct ExperimentConfig {
    std::string recipe = "tract";
    GeneratorConfig generator;
    DataSizes data;
    // vocab_size 0 takes the vocabulary size of `generator`.
    ModelConfig model = [] {
        ModelConfig m;
        m.vocab_size = 0;
        return m;
    }();
    PretrainConfig pretrain;
    int corpus_size = 50000;
    std::uint64_t corpus_seed = 5;
    // Reuse a saved seed model instead of pretraining; empty pretrains.
    std::string seed_checkpoint;
    TrainConfig stage1;
    TrainConfig stage2;
    SelfDataConfig self_data;
    PredictorSpec predictor;
    std::vector<std::uint64_t> seeds{1};
    std::vector<double> lambda_grid{0.2, 0.5, 1.0, 2.0, 5.0, 10.0};
    std::vector<int> k_grid{1, 2, 4, 8};
    int sequential_phase_b_epochs = 1;
    int degeneracy_samples = 200;
    int analysis_examples = 200;  // training inputs used by shift and perplexity
    std::string output_dir = "runs/default";

    void validate() const;
    ModelConfig resolved_model() const;
    bool operator==(const ExperimentConfig&) const = default;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Strict: unknown keys anywhere in the tree raise ConfigError naming the key.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

// Keys of `overlay` that also appear in `base`, as json pointers.
std::vector<std::string> overlapping_keys(const nlohmann::json& base, const nlohmann::json& overlay);

enum class CotSource { None, Annotation, Self };
const char* to_string(CotSource s);

struct RecipeBinding {
    std::string name;
    std::optional<Objective> objective;  // absent: no fine-tuning
    CotSource data = CotSource::None;
    Method inference = Method::CotRail;
    bool stage2_from_stage1 = false;
    std::string output;  // what the recipe measures
};

const std::vector<RecipeBinding>& recipe_catalog();
const RecipeBinding& find_recipe(const std::string& name);

inline const std::vector<std::string> kReportColumns{"dataset", "method", "r",   "rho",    "tau",
                                                     "rmse",    "n",      "K",   "lambda", "seed"};

struct ReportRow {
    std::string dataset;
    std::string method;
    std::optional<double> r, rho, tau;
    double rmse = 0.0;
    int n = 0;
    int k = 1;
    std::optional<double> lambda;
    std::string seed;
};

struct AnalysisRow {
    std::string model;
    std::string quantity;
    double value = 0.0;
    std::string seed;
};

struct RecipeOutput {
    std::vector<ReportRow> rows;
    std::vector<AnalysisRow> analysis;
    std::filesystem::path report_path;
    std::filesystem::path analysis_path;
    std::filesystem::path manifest_path;
};

using Progress = std::function<void(const std::string&)>;

// Runs the named recipe into config.output_dir: report.csv, analysis.csv,
// manifest.json, config.json, checkpoints/ and datasets/.
RecipeOutput run_recipe(const ExperimentConfig& config, const Progress& progress = {});

std::string format_number(double v);
std::string report_csv(const std::vector<ReportRow>& rows);
std::string analysis_csv(const std::vector<AnalysisRow>& rows);
std::vector<ReportRow> read_report(const std::filesystem::path& path);

struct Summary {
    std::string csv;
    std::string table;
};

// One row per input row, then mean and std rows per (dataset, method, K,
// lambda) group that has more than one seed.
Summary emit_summary(const std::vector<std::filesystem::path>& reports);

}  // namespace tract
