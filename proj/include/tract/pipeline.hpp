#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tract/metrics.hpp"
#include "tract/model.hpp"
#include "tract/objectives.hpp"
#include "tract/taskgen.hpp"

namespace tract {

struct TrainConfig {
    Objective objective = Objective::CotRaft;
    double lambda = 1.0;  // read by cot_raft only
    int epochs = 2;
    int batch_size = 8;
    double learning_rate = 3e-4;
    std::uint64_t seed = 11;
    Projection projection = Projection::Raw;
    bool ce_includes_score = true;
    // Global gradient-norm clip; 0 disables.
    double grad_clip = 1.0;
    OptimizerKind optimizer = OptimizerKind::Adam;
    // Cosine decay from learning_rate to 0 over all steps; off means constant.
    bool cosine_schedule = true;

    void validate() const;
    ObjectiveSpec objective_spec() const;
    bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainLogRow {
    int step = 0;
    int epoch = 0;
    double total = 0.0;
    double ce = 0.0;
    double sq = 0.0;
    double lambda = 0.0;
    int clamp_count = 0;
};

struct TrainResult {
    ModelParams params;
    std::vector<TrainLogRow> log;
    bool loss_decreased = true;
    std::vector<std::string> warnings;
};

struct TrainOverrides {
    // false keeps only the squared term (sequential schedule, second phase)
    bool cot_ce_term = true;
};

// Mini-batch training from a copy of `init`. Each epoch reshuffles with
// derive_seed(config.seed, epoch); the last partial batch is kept.
TrainResult train(const ModelParams& init, const Dataset& dataset, const TrainConfig& config,
                  const ScoreSpace& space, const TrainOverrides& overrides = {});

struct SelfDatasetResult {
    Dataset dataset;
    int dropped = 0;
    int resampled = 0;
    std::vector<std::uint64_t> dropped_ids;
};

// One sampled CoT per training input, cut after the delimiter and paired
// with the original score. `attempts` samples per input before dropping it.
SelfDatasetResult build_self_dataset(const ModelParams& stage1, const Dataset& train_set,
                                     const ScoreSpace& space, const SamplingConfig& sampling,
                                     std::uint64_t seed, int attempts = 3);

struct TractConfig {
    TrainConfig stage1;
    TrainConfig stage2;
    SamplingConfig sampling;
    int attempts = 3;
    std::uint64_t sample_seed = 23;
    // Initialize stage 2 from the stage-1 model instead of the seed model.
    bool stage2_from_stage1 = false;
};

struct PipelineResult {
    ModelParams stage1;
    SelfDatasetResult self_data;
    ModelParams final_model;
    std::string final_init_from;  // "p0" or "p_s"
    std::vector<TrainLogRow> stage1_log;
    std::vector<TrainLogRow> stage2_log;
    std::vector<std::string> warnings;
};

PipelineResult run_tract(const ModelParams& seed_model, const Dataset& train_set,
                         const TractConfig& config, const ScoreSpace& space);

struct SequentialConfig {
    TrainConfig phase_a;  // CoT cross-entropy
    int phase_b_epochs = 1;
    SamplingConfig sampling;
    std::uint64_t sample_seed = 29;
    int degeneracy_samples = 200;
};

struct SequentialResult {
    ModelParams params;
    std::vector<TrainLogRow> phase_a_log;
    std::vector<TrainLogRow> phase_b_log;
    DegeneracyStats stats;
};

// Phase A trains ce_cot; phase B continues the same weights with the
// squared term alone. Degeneracy is measured on `probe` inputs.
SequentialResult run_sequential(const ModelParams& seed_model, const Dataset& train_set,
                                const Dataset& probe, const SequentialConfig& config,
                                const ScoreSpace& space);

// CoT-RAIL samples on the first `n` probe inputs, summarized.
DegeneracyStats sample_degeneracy(const ModelParams& params, const Dataset& probe,
                                  const ScoreSpace& space, const SamplingConfig& sampling,
                                  std::uint64_t seed, int n);

}  // namespace tract
