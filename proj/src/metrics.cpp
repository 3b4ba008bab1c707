#include "tract/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tract {

namespace {

void check_lengths(std::span<const double> a, std::span<const double> b, const char* what) {
    if (a.size() != b.size()) {
        throw InputError(std::string(what) + ": length mismatch");
    }
}

double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

}  // namespace

std::optional<double> pearson(std::span<const double> xs, std::span<const double> ys) {
    check_lengths(xs, ys, "pearson");
    const std::size_t n = xs.size();
    if (n < 2) {
        return std::nullopt;
    }
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(n);
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(n);
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = xs[i] - mx;
        const double dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        return std::nullopt;
    }
    return clamp_unit(sxy / std::sqrt(sxx * syy));
}

std::vector<double> average_ranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) {
            ++j;
        }
        // positions i..j (0-based) share rank mean(i+1..j+1)
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            ranks[order[k]] = rank;
        }
        i = j + 1;
    }
    return ranks;
}

std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys) {
    check_lengths(xs, ys, "spearman");
    const auto rx = average_ranks(xs);
    const auto ry = average_ranks(ys);
    return pearson(rx, ry);
}

std::optional<double> kendall_tau_b(std::span<const double> xs, std::span<const double> ys) {
    check_lengths(xs, ys, "kendall");
    const std::size_t n = xs.size();
    if (n < 2) {
        return std::nullopt;
    }
    double concordant = 0.0;
    double discordant = 0.0;
    double untied_x = 0.0;  // pairs not tied in x
    double untied_y = 0.0;
    for (std::size_t i = 1; i < n; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            const double dx = xs[i] - xs[j];
            const double dy = ys[i] - ys[j];
            if (dx != 0.0) {
                untied_x += 1.0;
            }
            if (dy != 0.0) {
                untied_y += 1.0;
            }
            const double s = dx * dy;
            if (s > 0.0) {
                concordant += 1.0;
            } else if (s < 0.0) {
                discordant += 1.0;
            }
        }
    }
    if (untied_x == 0.0 || untied_y == 0.0) {
        return std::nullopt;
    }
    return clamp_unit((concordant - discordant) / std::sqrt(untied_x * untied_y));
}

double rmse(std::span<const double> preds, std::span<const double> targets) {
    check_lengths(preds, targets, "rmse");
    if (preds.empty()) {
        throw InputError("rmse: empty input");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double d = preds[i] - targets[i];
        total += d * d;
    }
    return std::sqrt(total / static_cast<double>(preds.size()));
}

CorrelationReport correlation_report(std::span<const double> preds,
                                     std::span<const double> targets, std::string method,
                                     std::string dataset) {
    CorrelationReport r;
    r.pearson_r = pearson(preds, targets);
    r.spearman_rho = spearman(preds, targets);
    r.kendall_tau = kendall_tau_b(preds, targets);
    r.rmse = rmse(preds, targets);
    r.n = preds.size();
    r.method = std::move(method);
    r.dataset = std::move(dataset);
    return r;
}

namespace {

std::vector<const Example*> in_id_order(const Dataset& dataset) {
    std::vector<const Example*> order;
    order.reserve(dataset.examples.size());
    for (const auto& ex : dataset.examples) {
        order.push_back(&ex);
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const Example* a, const Example* b) { return a->id < b->id; });
    return order;
}

}  // namespace

EvalResult evaluate_with(const Dataset& dataset, const Scorer& scorer, const std::string& method,
                         const std::string& dataset_tag) {
    EvalResult out;
    std::vector<double> preds;
    std::vector<double> targets;
    for (const Example* ex : in_id_order(dataset)) {
        PredictionRecord r = scorer(*ex);
        r.example_id = ex->id;
        preds.push_back(r.predicted);
        targets.push_back(static_cast<double>(ex->score));
        out.records.push_back(std::move(r));
    }
    out.report = correlation_report(preds, targets, method, dataset_tag);
    return out;
}

EvalResult evaluate_model(const ModelParams& params, const Dataset& dataset,
                          const PredictorSpec& spec, const ScoreSpace& space,
                          const std::string& dataset_tag) {
    return evaluate_with(
        dataset,
        [&](const Example& ex) {
            return predict(params, ex.x, space, spec, derive_seed(spec.seed, ex.id));
        },
        to_string(spec.method), dataset_tag);
}

ShiftReport distribution_shift_analysis(const ModelParams& params, const Dataset& dataset,
                                        const PredictorSpec& spec, const ScoreSpace& space) {
    std::vector<double> on_stored;
    std::vector<double> on_sampled;
    std::vector<double> targets;
    for (const Example* ex : in_id_order(dataset)) {
        if (!ex->s) {
            throw InputError("distribution_shift_analysis: example " + std::to_string(ex->id) +
                             " has no stored CoT");
        }
        TokenSeq context = ex->x;
        context.insert(context.end(), ex->s->begin(), ex->s->end());
        on_stored.push_back(
            expected_score(score_dist_after(params, context, space, spec.projection), space));
        on_sampled.push_back(predict_cot_rail(params, ex->x, space, spec.sampling,
                                              derive_seed(spec.seed, ex->id), spec.projection)
                                 .predicted);
        targets.push_back(static_cast<double>(ex->score));
    }
    ShiftReport r;
    r.n = targets.size();
    r.rmse_on_training_cots = rmse(on_stored, targets);
    r.rmse_on_self_cots = rmse(on_sampled, targets);
    r.gap = r.rmse_on_self_cots - r.rmse_on_training_cots;
    return r;
}

PairwiseResult pairwise_accuracy(const PairwiseSet& pairs, const Scorer& scorer) {
    PairwiseResult out;
    if (pairs.pairs.empty()) {
        throw InputError("pairwise_accuracy: empty pair set");
    }
    double total = 0.0;
    for (const auto& p : pairs.pairs) {
        PairRecord r;
        r.pair_id = p.id;
        r.gap = p.gap;
        r.score_first = scorer(p.first).predicted;
        r.score_second = scorer(p.second).predicted;
        if (r.score_first == r.score_second) {
            r.credit = 0.5;
        } else {
            const int predicted_winner = r.score_first > r.score_second ? 0 : 1;
            r.credit = predicted_winner == p.winner ? 1.0 : 0.0;
        }
        total += r.credit;
        out.records.push_back(r);
    }
    out.accuracy = total / static_cast<double>(pairs.pairs.size());
    return out;
}

PairwiseResult pairwise_accuracy(const ModelParams& params, const PairwiseSet& pairs,
                                 const PredictorSpec& spec, const ScoreSpace& space) {
    return pairwise_accuracy(pairs, [&](const Example& ex) {
        return predict(params, ex.x, space, spec, derive_seed(spec.seed, ex.id));
    });
}

double perplexity(const ModelParams& params, std::span<const CotText> corpus) {
    if (corpus.empty()) {
        throw InputError("perplexity: empty corpus");
    }
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& item : corpus) {
        nll -= sequence_logprob(params, item.x, item.cot);
        tokens += item.cot.size();
    }
    if (tokens == 0) {
        throw InputError("perplexity: corpus has no CoT tokens");
    }
    return std::exp(nll / static_cast<double>(tokens));
}

DegeneracyStats cot_degeneracy_stats(std::span<const PredictionRecord> records) {
    DegeneracyStats s;
    std::size_t with_cot = 0;
    double total_len = 0.0;
    for (const auto& r : records) {
        s.samples += static_cast<std::size_t>(r.k_samples);
        s.truncation_count += static_cast<std::size_t>(r.truncated_count);
        if (r.cot) {
            ++with_cot;
            total_len += static_cast<double>(r.cot->size());
            s.max_cot_length = std::max(s.max_cot_length, r.cot->size());
        }
    }
    if (s.samples > 0) {
        s.missing_delimiter_fraction =
            static_cast<double>(s.truncation_count) / static_cast<double>(s.samples);
    }
    if (with_cot > 0) {
        s.mean_cot_length = total_len / static_cast<double>(with_cot);
    }
    return s;
}

}  // namespace tract
