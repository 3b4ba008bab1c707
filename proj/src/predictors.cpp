#include "tract/predictors.hpp"

#include <cmath>

namespace tract {

const char* to_string(Method m) {
    switch (m) {
        case Method::ModeNoCot: return "mode_no_cot";
        case Method::Rail: return "rail";
        case Method::ModeCot: return "mode_cot";
        case Method::CotRail: return "cot_rail";
    }
    return "rail";
}

Method method_from_string(const std::string& s) {
    if (s == "mode_no_cot") return Method::ModeNoCot;
    if (s == "rail") return Method::Rail;
    if (s == "mode_cot") return Method::ModeCot;
    if (s == "cot_rail") return Method::CotRail;
    throw ConfigError("unknown predictor method '" + s +
                      "' (expected mode_no_cot|rail|mode_cot|cot_rail)");
}

bool method_uses_cot(Method m) { return m == Method::ModeCot || m == Method::CotRail; }

nlohmann::json PredictionRecord::to_json() const {
    nlohmann::json j{{"example_id", example_id},
                     {"predicted", predicted},
                     {"method", tract::to_string(method)},
                     {"cot", nullptr},
                     {"k_samples", k_samples},
                     {"truncated", truncated},
                     {"truncated_count", truncated_count}};
    if (cot) {
        j["cot"] = *cot;
    }
    return j;
}

PredictionRecord PredictionRecord::from_json(const nlohmann::json& j) {
    PredictionRecord r;
    r.example_id = j.at("example_id").get<std::uint64_t>();
    r.predicted = j.at("predicted").get<double>();
    r.method = method_from_string(j.at("method").get<std::string>());
    if (!j.at("cot").is_null()) {
        r.cot = j.at("cot").get<TokenSeq>();
    }
    r.k_samples = j.value("k_samples", 1);
    r.truncated = j.value("truncated", false);
    r.truncated_count = j.value("truncated_count", r.truncated ? 1 : 0);
    return r;
}

void to_json(nlohmann::json& j, const PredictorSpec& s) {
    j = nlohmann::json{{"method", to_string(s.method)},
                       {"projection", to_string(s.projection)},
                       {"sampling", s.sampling},
                       {"k", s.k},
                       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, PredictorSpec& s) {
    if (j.contains("method")) {
        s.method = method_from_string(j.at("method").get<std::string>());
    }
    if (j.contains("projection")) {
        s.projection = projection_from_string(j.at("projection").get<std::string>());
    }
    if (j.contains("sampling")) {
        s.sampling = j.at("sampling").get<SamplingConfig>();
    }
    s.k = j.value("k", s.k);
    s.seed = j.value("seed", s.seed);
}

namespace {

void check_range(double y, const ScoreSpace& space, Projection mode) {
    constexpr double kSlack = 1e-9;
    const double lo = mode == Projection::Renormalized ? space.min_value()
                                                       : std::min(0.0, space.min_value());
    const double hi = mode == Projection::Renormalized ? space.max_value()
                                                       : std::max(0.0, space.max_value());
    if (!(y >= lo - kSlack && y <= hi + kSlack)) {
        throw InternalError("expected score " + std::to_string(y) + " outside its valid range");
    }
}

struct CotSample {
    TokenSeq cot;
    bool truncated = false;
    std::vector<double> next_probs;  // distribution after [x, cot]
};

// Samples a rationale and stops as soon as the delimiter is complete, so the
// score distribution comes from the same decoder pass.
CotSample sample_cot(const ModelParams& params, const TokenSeq& x, const ScoreSpace& space,
                     const SamplingConfig& sampling, std::uint64_t seed) {
    sampling.validate();
    if (x.empty() || static_cast<int>(x.size()) > params.config.context_len) {
        throw InputError("predictor: input does not fit the context");
    }
    const StopRule at_delimiter{StopRule::Kind::AtDelimiter, space.delimiter()};
    Rng rng(seed);
    IncrementalDecoder dec(params);
    std::span<const double> logits;
    for (Token t : x) {
        logits = dec.push(t);
    }
    CotSample out;
    while (true) {
        const Token next = sample_from_logits(logits, out.cot, sampling, rng);
        if (dec.length() >= params.config.context_len) {
            // No room for another position; score what fits.
            out.truncated = true;
            break;
        }
        out.cot.push_back(next);
        logits = dec.push(next);
        if (at_delimiter.should_stop(out.cot)) {
            break;
        }
        if (static_cast<int>(out.cot.size()) >= sampling.max_new_tokens) {
            out.truncated = true;
            break;
        }
    }
    out.next_probs.resize(logits.size());
    softmax_row(logits, out.next_probs);
    return out;
}

PredictionRecord cot_record(const CotSample& s, Method method, double y) {
    PredictionRecord r;
    r.method = method;
    r.predicted = y;
    r.cot = s.cot;
    r.truncated = s.truncated;
    r.truncated_count = s.truncated ? 1 : 0;
    return r;
}

}  // namespace

ScoreDist score_dist_after(const ModelParams& params, std::span<const Token> context,
                           const ScoreSpace& space, Projection mode) {
    const NextTokenDist dist = forward_next_token(params, context);
    return project_score_dist(dist.probs, space, mode);
}

PredictionRecord predict_mode_no_cot(const ModelParams& params, const TokenSeq& x,
                                     const ScoreSpace& space) {
    PredictionRecord r;
    r.method = Method::ModeNoCot;
    r.predicted = mode_score(score_dist_after(params, x, space, Projection::Raw), space);
    return r;
}

PredictionRecord predict_rail(const ModelParams& params, const TokenSeq& x,
                              const ScoreSpace& space, Projection mode) {
    PredictionRecord r;
    r.method = Method::Rail;
    r.predicted = expected_score(score_dist_after(params, x, space, mode), space);
    check_range(r.predicted, space, mode);
    return r;
}

PredictionRecord predict_mode_cot(const ModelParams& params, const TokenSeq& x,
                                  const ScoreSpace& space, const SamplingConfig& sampling,
                                  std::uint64_t rng_seed) {
    const CotSample s = sample_cot(params, x, space, sampling, rng_seed);
    const ScoreDist dist = project_score_dist(s.next_probs, space, Projection::Raw);
    return cot_record(s, Method::ModeCot, mode_score(dist, space));
}

PredictionRecord predict_cot_rail(const ModelParams& params, const TokenSeq& x,
                                  const ScoreSpace& space, const SamplingConfig& sampling,
                                  std::uint64_t rng_seed, Projection mode) {
    const CotSample s = sample_cot(params, x, space, sampling, rng_seed);
    const double y = expected_score(project_score_dist(s.next_probs, space, mode), space);
    check_range(y, space, mode);
    return cot_record(s, Method::CotRail, y);
}

namespace {

template <typename Single>
PredictionRecord average_k(int k, std::uint64_t rng_seed, Method method, Single&& single) {
    if (k < 1) {
        throw ConfigError("predictor: K must be >= 1");
    }
    PredictionRecord out;
    out.method = method;
    out.k_samples = k;
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
        PredictionRecord r = single(derive_seed(rng_seed, static_cast<std::uint64_t>(i)));
        total += r.predicted;
        out.truncated_count += r.truncated_count;
        if (i == 0) {
            out.cot = std::move(r.cot);
        }
    }
    out.truncated = out.truncated_count > 0;
    out.predicted = total / k;
    return out;
}

}  // namespace

PredictionRecord predict_cot_rail_multi(const ModelParams& params, const TokenSeq& x,
                                        const ScoreSpace& space, const SamplingConfig& sampling,
                                        std::uint64_t rng_seed, int k, Projection mode) {
    return average_k(k, rng_seed, Method::CotRail, [&](std::uint64_t seed) {
        return predict_cot_rail(params, x, space, sampling, seed, mode);
    });
}

PredictionRecord predict_mode_cot_multi(const ModelParams& params, const TokenSeq& x,
                                        const ScoreSpace& space, const SamplingConfig& sampling,
                                        std::uint64_t rng_seed, int k) {
    return average_k(k, rng_seed, Method::ModeCot, [&](std::uint64_t seed) {
        return predict_mode_cot(params, x, space, sampling, seed);
    });
}

PredictionRecord predict(const ModelParams& params, const TokenSeq& x, const ScoreSpace& space,
                         const PredictorSpec& spec, std::uint64_t seed) {
    switch (spec.method) {
        case Method::ModeNoCot: return predict_mode_no_cot(params, x, space);
        case Method::Rail: return predict_rail(params, x, space, spec.projection);
        case Method::ModeCot:
            return predict_mode_cot_multi(params, x, space, spec.sampling, seed, spec.k);
        case Method::CotRail:
            return predict_cot_rail_multi(params, x, space, spec.sampling, seed, spec.k,
                                          spec.projection);
    }
    throw InternalError("predict: unknown method");
}

}  // namespace tract
