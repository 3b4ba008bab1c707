#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tract/model.hpp"
#include "tract/predictors.hpp"
#include "tract/taskgen.hpp"

namespace tract {

// Correlations are absent (nullopt) when either side is constant or n < 2.
std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys);
std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys);
std::optional<double> kendall_tau_b(std::span<const double> xs, std::span<const double> ys);
double rmse(std::span<const double> preds, std::span<const double> targets);

// 1-based ranks; tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

struct CorrelationReport {
    std::optional<double> pearson_r;
    std::optional<double> spearman_rho;
    std::optional<double> kendall_tau;
    double rmse = 0.0;
    std::size_t n = 0;
    std::string method;
    std::string dataset;
};

CorrelationReport correlation_report(std::span<const double> preds,
                                     std::span<const double> targets, std::string method,
                                     std::string dataset);

struct EvalResult {
    CorrelationReport report;
    std::vector<PredictionRecord> records;
};

using Scorer = std::function<PredictionRecord(const Example&)>;

// Applies `scorer` to every example in id order.
EvalResult evaluate_with(const Dataset& dataset, const Scorer& scorer, const std::string& method,
                         const std::string& dataset_tag);

// Per-example seeds are derive_seed(spec.seed, example.id).
EvalResult evaluate_model(const ModelParams& params, const Dataset& dataset,
                          const PredictorSpec& spec, const ScoreSpace& space,
                          const std::string& dataset_tag = "test");

struct ShiftReport {
    double rmse_on_training_cots = 0.0;
    double rmse_on_self_cots = 0.0;
    double gap = 0.0;
    std::size_t n = 0;
};

// CoT-RAIL conditioned on the stored CoT versus on a freshly sampled one.
ShiftReport distribution_shift_analysis(const ModelParams& params, const Dataset& dataset,
                                        const PredictorSpec& spec, const ScoreSpace& space);

struct PairRecord {
    std::uint64_t pair_id = 0;
    double score_first = 0.0;
    double score_second = 0.0;
    double credit = 0.0;
    int gap = 0;
};

struct PairwiseResult {
    double accuracy = 0.0;
    std::vector<PairRecord> records;
};

// 1 when the higher score matches the known winner, 0.5 on exact ties.
PairwiseResult pairwise_accuracy(const PairwiseSet& pairs, const Scorer& scorer);
PairwiseResult pairwise_accuracy(const ModelParams& params, const PairwiseSet& pairs,
                                 const PredictorSpec& spec, const ScoreSpace& space);

struct CotText {
    TokenSeq x;
    TokenSeq cot;
};

// exp of the token-weighted mean NLL of each CoT given its input.
double perplexity(const ModelParams& params, std::span<const CotText> corpus);

struct DegeneracyStats {
    double missing_delimiter_fraction = 0.0;
    double mean_cot_length = 0.0;
    std::size_t max_cot_length = 0;
    std::size_t truncation_count = 0;
    std::size_t samples = 0;
};

DegeneracyStats cot_degeneracy_stats(std::span<const PredictionRecord> records);

}  // namespace tract
