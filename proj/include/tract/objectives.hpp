#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tract/model.hpp"
#include "tract/score_space.hpp"
#include "tract/taskgen.hpp"

namespace tract {

enum class Objective { CeScore, CeCot, Raft, CotRaft };

const char* to_string(Objective o);
Objective objective_from_string(const std::string& s);
bool objective_uses_cot(Objective o);

inline constexpr double kLogFloor = 1e-12;

struct ObjectiveSpec {
    Objective kind = Objective::CotRaft;
    double lambda = 1.0;
    Projection projection = Projection::Raw;
    // Whether the CoT cross-entropy covers the score token.
    bool ce_includes_score = true;
    // When false, CoT-RAFT keeps only its squared term (sequential phase B).
    bool cot_ce_term = true;
};

struct ExampleLoss {
    std::uint64_t example_id = 0;
    double total = 0.0;
    double ce = 0.0;
    double sq = 0.0;
    int clamp_count = 0;
};

struct LossBreakdown {
    double total = 0.0;
    double ce_component = 0.0;
    double sq_component = 0.0;  // pre-lambda squared error
    double lambda = 0.0;
    int clamp_count = 0;
    std::vector<ExampleLoss> per_example;
};

// Loss for one example; when `grads` is non-null, accumulates
// `grad_weight` times the example's gradient into it.
ExampleLoss evaluate_example(const ModelParams& params, const Example& example,
                             const ObjectiveSpec& spec, const ScoreSpace& space,
                             ModelParams* grads = nullptr, double grad_weight = 1.0);

// Mean over the batch (per-example rows kept in input order).
LossBreakdown evaluate_batch(const ModelParams& params, std::span<const Example> batch,
                             const ObjectiveSpec& spec, const ScoreSpace& space);

struct GradientResult {
    LossBreakdown loss;
    ModelParams grads;
};

// Gradient of the batch-mean loss. Throws NumericalError naming the first
// example with a non-finite loss.
GradientResult compute_gradients(const ModelParams& params, std::span<const Example> batch,
                                 const ObjectiveSpec& spec, const ScoreSpace& space);

// Single-example conveniences matching the four losses.
LossBreakdown loss_ce_score(const ModelParams& params, const TokenSeq& x, int y,
                            const ScoreSpace& space);
LossBreakdown loss_ce_cot(const ModelParams& params, const TokenSeq& x, const TokenSeq& s, int y,
                          const ScoreSpace& space);
LossBreakdown loss_raft(const ModelParams& params, const TokenSeq& x, int y,
                        const ScoreSpace& space, Projection mode = Projection::Raw);
LossBreakdown loss_cot_raft(const ModelParams& params, const TokenSeq& x, const TokenSeq& s,
                            int y, double lambda, const ScoreSpace& space,
                            Projection mode = Projection::Raw);

}  // namespace tract
