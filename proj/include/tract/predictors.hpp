#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "tract/model.hpp"
#include "tract/score_space.hpp"

namespace tract {

enum class Method { ModeNoCot, Rail, ModeCot, CotRail };

const char* to_string(Method m);
Method method_from_string(const std::string& s);
bool method_uses_cot(Method m);

struct PredictionRecord {
    std::uint64_t example_id = 0;
    double predicted = 0.0;
    Method method = Method::Rail;
    std::optional<TokenSeq> cot;  // first sampled CoT when the method uses one
    int k_samples = 1;
    bool truncated = false;
    int truncated_count = 0;

    nlohmann::json to_json() const;
    static PredictionRecord from_json(const nlohmann::json& j);
};

struct PredictorSpec {
    Method method = Method::CotRail;
    Projection projection = Projection::Raw;
    SamplingConfig sampling;
    int k = 1;
    std::uint64_t seed = 0;

    bool operator==(const PredictorSpec&) const = default;
};

void to_json(nlohmann::json& j, const PredictorSpec& s);
void from_json(const nlohmann::json& j, PredictorSpec& s);

// Score distribution read at the position after `context`.
ScoreDist score_dist_after(const ModelParams& params, std::span<const Token> context,
                           const ScoreSpace& space, Projection mode);

PredictionRecord predict_mode_no_cot(const ModelParams& params, const TokenSeq& x,
                                     const ScoreSpace& space);
PredictionRecord predict_rail(const ModelParams& params, const TokenSeq& x,
                              const ScoreSpace& space, Projection mode = Projection::Raw);
PredictionRecord predict_mode_cot(const ModelParams& params, const TokenSeq& x,
                                  const ScoreSpace& space, const SamplingConfig& sampling,
                                  std::uint64_t rng_seed);
PredictionRecord predict_cot_rail(const ModelParams& params, const TokenSeq& x,
                                  const ScoreSpace& space, const SamplingConfig& sampling,
                                  std::uint64_t rng_seed, Projection mode = Projection::Raw);

// Mean of K predict_cot_rail values with per-sample seeds
// derive_seed(rng_seed, k).
PredictionRecord predict_cot_rail_multi(const ModelParams& params, const TokenSeq& x,
                                        const ScoreSpace& space, const SamplingConfig& sampling,
                                        std::uint64_t rng_seed, int k,
                                        Projection mode = Projection::Raw);

// Mean of K CoT-mode predictions; baseline for the multi-CoT comparison.
PredictionRecord predict_mode_cot_multi(const ModelParams& params, const TokenSeq& x,
                                        const ScoreSpace& space, const SamplingConfig& sampling,
                                        std::uint64_t rng_seed, int k);

// Dispatches on spec.method; `seed` is the per-example seed.
PredictionRecord predict(const ModelParams& params, const TokenSeq& x, const ScoreSpace& space,
                         const PredictorSpec& spec, std::uint64_t seed);

}  // namespace tract
