#include "tract/objectives.hpp"

#include <cmath>

namespace tract {

const char* to_string(Objective o) {
    switch (o) {
        case Objective::CeScore: return "ce_score";
        case Objective::CeCot: return "ce_cot";
        case Objective::Raft: return "raft";
        case Objective::CotRaft: return "cot_raft";
    }
    return "cot_raft";
}

Objective objective_from_string(const std::string& s) {
    if (s == "ce_score") return Objective::CeScore;
    if (s == "ce_cot") return Objective::CeCot;
    if (s == "raft") return Objective::Raft;
    if (s == "cot_raft") return Objective::CotRaft;
    throw ConfigError("unknown objective '" + s + "' (expected ce_score|ce_cot|raft|cot_raft)");
}

bool objective_uses_cot(Objective o) { return o == Objective::CeCot || o == Objective::CotRaft; }

namespace {

const double kLogFloorValue = std::log(kLogFloor);

// Adds -log p(target) at `row` to the loss and its logit gradient, scaled
// by `weight`. Probabilities under the floor contribute the floor and no
// gradient.
double add_ce_term(const Matrix& logits, Eigen::Index row, Token target, double weight,
                   Matrix* dlogits, int& clamps) {
    const std::span<const double> z(logits.data() + row * logits.cols(),
                                    static_cast<std::size_t>(logits.cols()));
    const auto lp = log_softmax_row(z);
    const double l = lp[static_cast<std::size_t>(target)];
    if (l < kLogFloorValue) {
        ++clamps;
        return -kLogFloorValue;
    }
    if (dlogits != nullptr) {
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            (*dlogits)(row, j) += weight * std::exp(lp[static_cast<std::size_t>(j)]);
        }
        (*dlogits)(row, target) -= weight;
    }
    return -l;
}

// Squared error of the expected score at `row`; gradient scaled by `weight`.
double add_sq_term(const Matrix& logits, Eigen::Index row, double target, Projection mode,
                   const ScoreSpace& space, double weight, Matrix* dlogits) {
    const std::span<const double> z(logits.data() + row * logits.cols(),
                                    static_cast<std::size_t>(logits.cols()));
    std::vector<double> probs(z.size());
    softmax_row(z, probs);
    const ScoreDist dist = project_score_dist(probs, space, mode);
    const double y_hat = expected_score(dist, space);
    const double err = y_hat - target;
    if (dlogits != nullptr && weight != 0.0) {
        const double coef = weight * 2.0 * err;
        if (mode == Projection::Raw) {
            // d y_hat / d z_j = p_j (v_j [j in Y] - y_hat)
            for (Eigen::Index j = 0; j < logits.cols(); ++j) {
                (*dlogits)(row, j) -= coef * probs[static_cast<std::size_t>(j)] * y_hat;
            }
            for (const auto& e : space.entries()) {
                (*dlogits)(row, e.token) += coef * probs[static_cast<std::size_t>(e.token)] * e.value;
            }
        } else {
            // Softmax restricted to Y: d y_hat / d z_j = q_j (v_j - y_hat)
            for (std::size_t i = 0; i < space.size(); ++i) {
                const auto& e = space.entries()[i];
                (*dlogits)(row, e.token) += coef * dist.probs[i] * (e.value - y_hat);
            }
        }
    }
    return err * err;
}

}  // namespace

ExampleLoss evaluate_example(const ModelParams& params, const Example& example,
                             const ObjectiveSpec& spec, const ScoreSpace& space,
                             ModelParams* grads, double grad_weight) {
    const bool with_cot = objective_uses_cot(spec.kind);
    if (with_cot) {
        if (!example.s) {
            throw ConfigError("objective " + std::string(to_string(spec.kind)) +
                              " needs a CoT but example " + std::to_string(example.id) +
                              " has none");
        }
        const auto end = find_last_delimiter_end(*example.s, space.delimiter());
        if (!end || *end != example.s->size()) {
            throw InputError("CoT of example " + std::to_string(example.id) +
                             " does not end with the delimiter");
        }
    }
    if (spec.lambda < 0.0) {
        throw ConfigError("objective: lambda must be >= 0");
    }
    const Token score_token = space.str_of(static_cast<double>(example.score));

    TokenSeq inputs = example.x;
    if (with_cot) {
        inputs.insert(inputs.end(), example.s->begin(), example.s->end());
    }
    // The score token itself is only ever a target.
    const ForwardCache cache = forward(params, inputs);
    const Eigen::Index score_row = static_cast<Eigen::Index>(inputs.size()) - 1;
    const Eigen::Index first_row = static_cast<Eigen::Index>(example.x.size()) - 1;

    Matrix dlogits;
    Matrix* dl = nullptr;
    if (grads != nullptr) {
        dlogits = Matrix::Zero(cache.logits.rows(), cache.logits.cols());
        dl = &dlogits;
    }

    ExampleLoss out;
    out.example_id = example.id;
    switch (spec.kind) {
        case Objective::CeScore:
            out.ce = add_ce_term(cache.logits, score_row, score_token, grad_weight, dl,
                                 out.clamp_count);
            out.total = out.ce;
            break;
        case Objective::Raft:
            out.sq = add_sq_term(cache.logits, score_row, example.score, spec.projection, space,
                                 grad_weight, dl);
            out.total = out.sq;
            break;
        case Objective::CeCot:
        case Objective::CotRaft: {
            const bool ce_on = spec.kind == Objective::CeCot || spec.cot_ce_term;
            if (ce_on) {
                for (Eigen::Index row = first_row; row < score_row; ++row) {
                    const Token target = inputs[static_cast<std::size_t>(row + 1)];
                    out.ce += add_ce_term(cache.logits, row, target, grad_weight, dl,
                                          out.clamp_count);
                }
                if (spec.ce_includes_score) {
                    out.ce += add_ce_term(cache.logits, score_row, score_token, grad_weight, dl,
                                          out.clamp_count);
                }
            }
            if (spec.kind == Objective::CeCot) {
                out.total = out.ce;
            } else {
                out.sq = add_sq_term(cache.logits, score_row, example.score, spec.projection,
                                     space, spec.lambda * grad_weight, dl);
                out.total = spec.lambda * out.sq + out.ce;
            }
            break;
        }
    }
    if (!std::isfinite(out.total)) {
        throw NumericalError("non-finite loss", example.id);
    }
    if (grads != nullptr) {
        backward(params, cache, dlogits, *grads);
    }
    return out;
}

namespace {

LossBreakdown reduce(std::vector<ExampleLoss> rows, double lambda) {
    LossBreakdown b;
    b.lambda = lambda;
    if (rows.empty()) {
        return b;
    }
    for (const auto& r : rows) {
        b.total += r.total;
        b.ce_component += r.ce;
        b.sq_component += r.sq;
        b.clamp_count += r.clamp_count;
    }
    const double n = static_cast<double>(rows.size());
    b.total /= n;
    b.ce_component /= n;
    b.sq_component /= n;
    b.per_example = std::move(rows);
    return b;
}

double effective_lambda(const ObjectiveSpec& spec) {
    switch (spec.kind) {
        case Objective::CotRaft: return spec.lambda;
        case Objective::Raft: return 1.0;
        default: return 0.0;
    }
}

}  // namespace

LossBreakdown evaluate_batch(const ModelParams& params, std::span<const Example> batch,
                             const ObjectiveSpec& spec, const ScoreSpace& space) {
    std::vector<ExampleLoss> rows;
    rows.reserve(batch.size());
    for (const auto& ex : batch) {
        rows.push_back(evaluate_example(params, ex, spec, space));
    }
    return reduce(std::move(rows), effective_lambda(spec));
}

GradientResult compute_gradients(const ModelParams& params, std::span<const Example> batch,
                                 const ObjectiveSpec& spec, const ScoreSpace& space) {
    GradientResult r{{}, ModelParams::zeros(params.config)};
    if (batch.empty()) {
        return r;
    }
    const double w = 1.0 / static_cast<double>(batch.size());
    std::vector<ExampleLoss> rows;
    rows.reserve(batch.size());
    for (const auto& ex : batch) {
        rows.push_back(evaluate_example(params, ex, spec, space, &r.grads, w));
    }
    r.loss = reduce(std::move(rows), effective_lambda(spec));
    return r;
}

namespace {

Example make_example(const TokenSeq& x, const TokenSeq* s, int y) {
    Example ex;
    ex.x = x;
    if (s != nullptr) {
        ex.s = *s;
    }
    ex.score = y;
    return ex;
}

LossBreakdown single(const ModelParams& params, const Example& ex, const ObjectiveSpec& spec,
                     const ScoreSpace& space) {
    return reduce({evaluate_example(params, ex, spec, space)}, effective_lambda(spec));
}

}  // namespace

LossBreakdown loss_ce_score(const ModelParams& params, const TokenSeq& x, int y,
                            const ScoreSpace& space) {
    return single(params, make_example(x, nullptr, y), {Objective::CeScore}, space);
}

LossBreakdown loss_ce_cot(const ModelParams& params, const TokenSeq& x, const TokenSeq& s, int y,
                          const ScoreSpace& space) {
    return single(params, make_example(x, &s, y), {Objective::CeCot}, space);
}

LossBreakdown loss_raft(const ModelParams& params, const TokenSeq& x, int y,
                        const ScoreSpace& space, Projection mode) {
    ObjectiveSpec spec{Objective::Raft};
    spec.projection = mode;
    return single(params, make_example(x, nullptr, y), spec, space);
}

LossBreakdown loss_cot_raft(const ModelParams& params, const TokenSeq& x, const TokenSeq& s,
                            int y, double lambda, const ScoreSpace& space, Projection mode) {
    ObjectiveSpec spec{Objective::CotRaft, lambda, mode};
    return single(params, make_example(x, &s, y), spec, space);
}

}  // namespace tract
