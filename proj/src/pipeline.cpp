#include "tract/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "tract/predictors.hpp"

namespace tract {

void TrainConfig::validate() const {
    if (epochs < 1) {
        throw ConfigError("train: epochs must be >= 1");
    }
    if (batch_size < 1) {
        throw ConfigError("train: batch_size must be >= 1");
    }
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("train: learning_rate must be finite and >= 0");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw ConfigError("train: lambda must be finite and >= 0");
    }
    if (!(grad_clip >= 0.0)) {
        throw ConfigError("train: grad_clip must be >= 0");
    }
}

ObjectiveSpec TrainConfig::objective_spec() const {
    ObjectiveSpec spec;
    spec.kind = objective;
    spec.lambda = lambda;
    spec.projection = projection;
    spec.ce_includes_score = ce_includes_score;
    return spec;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"objective", to_string(c.objective)},
                       {"lambda", c.lambda},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"learning_rate", c.learning_rate},
                       {"seed", c.seed},
                       {"projection", to_string(c.projection)},
                       {"ce_includes_score", c.ce_includes_score},
                       {"grad_clip", c.grad_clip},
                       {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
                       {"cosine_schedule", c.cosine_schedule}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (j.contains("objective")) {
        c.objective = objective_from_string(j.at("objective").get<std::string>());
    }
    c.lambda = j.value("lambda", c.lambda);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    if (j.contains("projection")) {
        c.projection = projection_from_string(j.at("projection").get<std::string>());
    }
    c.ce_includes_score = j.value("ce_includes_score", c.ce_includes_score);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.cosine_schedule = j.value("cosine_schedule", c.cosine_schedule);
    if (j.contains("optimizer")) {
        const auto s = j.at("optimizer").get<std::string>();
        if (s == "adam") {
            c.optimizer = OptimizerKind::Adam;
        } else if (s == "sgd") {
            c.optimizer = OptimizerKind::Sgd;
        } else {
            throw ConfigError("train: unknown optimizer '" + s + "' (expected adam|sgd)");
        }
    }
}

namespace {

double global_norm(const ModelParams& g) {
    double total = 0.0;
    for (const auto& t : g.tensors()) {
        total += t.value->squaredNorm();
    }
    return std::sqrt(total);
}

double mean_total(const std::vector<TrainLogRow>& log, std::size_t begin, std::size_t end) {
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        s += log[i].total;
    }
    return s / static_cast<double>(end - begin);
}

}  // namespace

TrainResult train(const ModelParams& init, const Dataset& dataset, const TrainConfig& config,
                  const ScoreSpace& space, const TrainOverrides& overrides) {
    config.validate();
    if (dataset.examples.empty()) {
        throw InputError("train: empty dataset");
    }
    if (objective_uses_cot(config.objective)) {
        for (const auto& ex : dataset.examples) {
            if (!ex.s) {
                throw ConfigError(std::string("train: objective ") + to_string(config.objective) +
                                  " needs CoTs but example " + std::to_string(ex.id) +
                                  " has none");
            }
        }
    }
    ObjectiveSpec spec = config.objective_spec();
    spec.cot_ce_term = overrides.cot_ce_term;

    TrainResult result{init, {}, true, {}};
    OptimizerState opt;
    opt.config.kind = config.optimizer;

    const std::size_t n = dataset.examples.size();
    const std::size_t bs = static_cast<std::size_t>(config.batch_size);
    std::vector<std::size_t> order(n);
    std::vector<Example> batch;
    const std::size_t per_epoch = (n + bs - 1) / bs;
    const double total_steps = static_cast<double>(per_epoch * static_cast<std::size_t>(config.epochs));
    int step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += bs) {
            batch.clear();
            for (std::size_t i = start; i < std::min(n, start + bs); ++i) {
                batch.push_back(dataset.examples[order[i]]);
            }
            GradientResult g = compute_gradients(result.params, batch, spec, space);
            if (config.grad_clip > 0.0) {
                const double norm = global_norm(g.grads);
                if (norm > config.grad_clip) {
                    g.grads.scale(config.grad_clip / norm);
                }
            }
            double lr = config.learning_rate;
            if (config.cosine_schedule) {
                lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * step / total_steps));
            }
            apply_update(result.params, g.grads, opt, lr);
            if (!result.params.all_finite()) {
                throw NumericalError("train: parameters became non-finite at step " +
                                         std::to_string(step),
                                     batch.front().id);
            }
            result.log.push_back({step, epoch, g.loss.total, g.loss.ce_component,
                                  g.loss.sq_component, g.loss.lambda, g.loss.clamp_count});
            ++step;
        }
    }

    // First epoch against last epoch, or first quarter against last quarter
    // for single-epoch runs.
    const std::size_t steps = result.log.size();
    const std::size_t window =
        config.epochs > 1 ? steps / static_cast<std::size_t>(config.epochs)
                          : std::max<std::size_t>(1, steps / 4);
    const double first = mean_total(result.log, 0, window);
    const double last = mean_total(result.log, steps - window, steps);
    result.loss_decreased = last < first;
    if (!result.loss_decreased && config.learning_rate > 0.0) {
        result.warnings.push_back("train: loss did not decrease (first window " +
                                  std::to_string(first) + ", last window " +
                                  std::to_string(last) + ")");
    }
    return result;
}

SelfDatasetResult build_self_dataset(const ModelParams& stage1, const Dataset& train_set,
                                     const ScoreSpace& space, const SamplingConfig& sampling,
                                     std::uint64_t seed, int attempts) {
    if (attempts < 1) {
        throw ConfigError("build_self_dataset: attempts must be >= 1");
    }
    sampling.validate();
    SelfDatasetResult out;
    out.dataset.split = train_set.split;
    out.dataset.fingerprint = train_set.fingerprint;
    out.dataset.score_space = train_set.score_space;
    const StopRule stop{StopRule::Kind::DelimiterPlusOne, space.delimiter()};
    for (const auto& ex : train_set.examples) {
        bool kept = false;
        for (int a = 0; a < attempts; ++a) {
            if (a > 0) {
                ++out.resampled;
            }
            const SampleResult s =
                sample_sequence(stage1, ex.x, sampling, stop,
                                derive_seed(seed, ex.id, static_cast<std::uint64_t>(a)));
            // The first delimiter ends the rationale; whatever follows is the
            // model's own score and is discarded.
            std::optional<std::size_t> cut;
            const auto& d = space.delimiter();
            for (std::size_t end = d.size(); end <= s.tokens.size(); ++end) {
                if (std::equal(d.begin(), d.end(), s.tokens.begin() + (end - d.size()))) {
                    cut = end;
                    break;
                }
            }
            if (!cut) {
                continue;
            }
            Example copy = ex;
            copy.s = TokenSeq(s.tokens.begin(), s.tokens.begin() + *cut);
            copy.provenance = Provenance::SelfStage1;
            out.dataset.examples.push_back(std::move(copy));
            kept = true;
            break;
        }
        if (!kept) {
            ++out.dropped;
            out.dropped_ids.push_back(ex.id);
        }
    }
    if (2 * static_cast<std::size_t>(out.dropped) > train_set.examples.size()) {
        throw PipelineError("build_self_dataset: dropped " + std::to_string(out.dropped) + " of " +
                            std::to_string(train_set.examples.size()) +
                            " inputs for lack of a delimiter; stage-1 model is too degenerate");
    }
    return out;
}

PipelineResult run_tract(const ModelParams& seed_model, const Dataset& train_set,
                         const TractConfig& config, const ScoreSpace& space) {
    if (config.stage1.objective != Objective::CotRaft ||
        config.stage2.objective != Objective::CotRaft) {
        throw ConfigError("run_tract: both stages train cot_raft");
    }
    PipelineResult r;
    TrainResult s1 = train(seed_model, train_set, config.stage1, space);
    r.stage1_log = std::move(s1.log);
    r.warnings = std::move(s1.warnings);
    // Stage 2 only ever reads this snapshot.
    const ModelParams frozen = s1.params;
    r.self_data =
        build_self_dataset(frozen, train_set, space, config.sampling, config.sample_seed,
                           config.attempts);
    const ModelParams& init = config.stage2_from_stage1 ? frozen : seed_model;
    r.final_init_from = config.stage2_from_stage1 ? "p_s" : "p0";
    TrainResult s2 = train(init, r.self_data.dataset, config.stage2, space);
    r.stage2_log = std::move(s2.log);
    r.warnings.insert(r.warnings.end(), s2.warnings.begin(), s2.warnings.end());
    r.final_model = std::move(s2.params);
    r.stage1 = frozen;
    return r;
}

DegeneracyStats sample_degeneracy(const ModelParams& params, const Dataset& probe,
                                  const ScoreSpace& space, const SamplingConfig& sampling,
                                  std::uint64_t seed, int n) {
    std::vector<PredictionRecord> records;
    const std::size_t count = std::min(probe.examples.size(), static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < count; ++i) {
        const Example& ex = probe.examples[i];
        records.push_back(predict_cot_rail(params, ex.x, space, sampling, derive_seed(seed, ex.id),
                                           Projection::Raw));
    }
    return cot_degeneracy_stats(records);
}

SequentialResult run_sequential(const ModelParams& seed_model, const Dataset& train_set,
                                const Dataset& probe, const SequentialConfig& config,
                                const ScoreSpace& space) {
    if (config.phase_b_epochs < 0) {
        throw ConfigError("run_sequential: phase_b_epochs must be >= 0");
    }
    TrainConfig a = config.phase_a;
    a.objective = Objective::CeCot;
    TrainResult ra = train(seed_model, train_set, a, space);
    SequentialResult out;
    out.phase_a_log = std::move(ra.log);
    out.params = std::move(ra.params);
    if (config.phase_b_epochs > 0) {
        TrainConfig b = config.phase_a;
        b.objective = Objective::CotRaft;
        b.epochs = config.phase_b_epochs;
        b.seed = derive_seed(config.phase_a.seed, 0xb);
        TrainResult rb = train(out.params, train_set, b, space, TrainOverrides{false});
        out.phase_b_log = std::move(rb.log);
        out.params = std::move(rb.params);
    }
    out.stats = sample_degeneracy(out.params, probe, space, config.sampling, config.sample_seed,
                                  config.degeneracy_samples);
    return out;
}

}  // namespace tract
