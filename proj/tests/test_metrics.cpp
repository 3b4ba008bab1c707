#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tract/metrics.hpp"

using namespace tract;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, bool tied) {
    std::vector<double> v(n);
    for (auto& x : v) {
        x = tied ? static_cast<double>(rng.range(1, 5)) : rng.normal() * 3.0 + 1.0;
    }
    return v;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("small worked values") {
    const std::vector<double> a{1, 2, 3}, b{2, 4, 6}, c{1, 3, 2};
    CHECK(*pearson(a, b) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(*spearman(a, b) == doctest::Approx(1.0).epsilon(1e-15));
    // two concordant pairs, one discordant
    CHECK(*kendall_tau_b(a, c) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(rmse(std::vector<double>{1, 3}, std::vector<double>{3, 1}) == 2.0);
    CHECK(rmse(a, a) == 0.0);
}

TEST_CASE("constant input gives absent correlations") {
    const std::vector<double> k{2, 2, 2, 2}, v{1, 2, 3, 4};
    CHECK_FALSE(pearson(k, v).has_value());
    CHECK_FALSE(spearman(v, k).has_value());
    CHECK_FALSE(kendall_tau_b(k, v).has_value());
    CHECK_FALSE(pearson(std::vector<double>{1}, std::vector<double>{1}).has_value());
    CHECK_THROWS_AS(pearson(k, std::vector<double>{1, 2}), InputError);
    CHECK_THROWS_AS(rmse(std::vector<double>{}, std::vector<double>{}), InputError);
}

TEST_CASE("matches direct-formula oracle on random vectors") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const bool tied = trial % 2 == 1;
        const auto x = random_vec(rng, 50, tied);
        const auto y = random_vec(rng, 50, tied);
        CHECK(std::abs(*pearson(x, y) - oracle::pearson(x, y)) < 1e-12);
        CHECK(std::abs(*spearman(x, y) - oracle::spearman(x, y)) < 1e-12);
        CHECK(std::abs(*kendall_tau_b(x, y) - oracle::kendall_b(x, y)) < 1e-12);
        CHECK(std::abs(rmse(x, y) - oracle::rmse(x, y)) < 1e-12);
    }
}

TEST_CASE("invariant under positive affine maps") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_vec(rng, 30, trial % 3 == 0);
        const auto y = random_vec(rng, 30, false);
        std::vector<double> x2 = x;
        for (auto& v : x2) v = 2.5 * v + 7.0;
        CHECK(*pearson(x2, y) == doctest::Approx(*pearson(x, y)).epsilon(1e-12));
        CHECK(*spearman(x2, y) == *spearman(x, y));
        CHECK(*kendall_tau_b(x2, y) == *kendall_tau_b(x, y));
    }
}

TEST_CASE("spearman is pearson on average ranks") {
    Rng rng(6);
    const auto x = random_vec(rng, 40, true);
    const auto y = random_vec(rng, 40, true);
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    CHECK(*spearman(x, y) == *pearson(rx, ry));
    const auto r = average_ranks(std::vector<double>{10, 20, 20, 5});
    CHECK(r == std::vector<double>{2, 3.5, 3.5, 1});
}

TEST_CASE("kendall bounds and co-monotone pairs") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_vec(rng, 25, true);
        const auto y = random_vec(rng, 25, true);
        const double t = *kendall_tau_b(x, y);
        CHECK(t >= -1.0);
        CHECK(t <= 1.0);
        std::vector<double> a = random_vec(rng, 25, false);
        std::vector<double> b(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) b[i] = std::exp(a[i]);
        CHECK(*kendall_tau_b(a, b) == 1.0);
    }
}

TEST_CASE("evaluate_with oracle and constant scorers") {
    Dataset ds;
    for (int i = 0; i < 10; ++i) {
        Example ex;
        ex.id = static_cast<std::uint64_t>(9 - i);  // reverse order on purpose
        ex.score = 1 + i % 5;
        ds.examples.push_back(ex);
    }
    auto exact = evaluate_with(
        ds, [](const Example& ex) { PredictionRecord r; r.predicted = ex.score; return r; },
        "oracle", "test");
    CHECK(*exact.report.pearson_r == doctest::Approx(1.0));
    CHECK(*exact.report.spearman_rho == doctest::Approx(1.0));
    CHECK(*exact.report.kendall_tau == doctest::Approx(1.0));
    CHECK(exact.report.rmse == 0.0);
    CHECK(exact.records.front().example_id == 0);
    CHECK(exact.records.back().example_id == 9);

    auto flat = evaluate_with(
        ds, [](const Example&) { PredictionRecord r; r.predicted = 3.0; return r; }, "const",
        "test");
    CHECK_FALSE(flat.report.pearson_r.has_value());
    CHECK(flat.report.rmse == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("pairwise accuracy credit rules") {
    PairwiseSet ps;
    for (int i = 0; i < 6; ++i) {
        ExamplePair p;
        p.id = static_cast<std::uint64_t>(i);
        p.first.score = 1 + i % 3;
        p.second.score = p.first.score + 2;
        if (i % 2 == 1) std::swap(p.first, p.second);
        p.winner = p.first.score > p.second.score ? 0 : 1;
        p.gap = 2;
        ps.pairs.push_back(p);
    }
    auto exact = pairwise_accuracy(
        ps, [](const Example& ex) { PredictionRecord r; r.predicted = ex.score; return r; });
    CHECK(exact.accuracy == 1.0);
    auto flat = pairwise_accuracy(ps, [](const Example&) { return PredictionRecord{}; });
    CHECK(flat.accuracy == 0.5);
    auto inverted = pairwise_accuracy(
        ps, [](const Example& ex) { PredictionRecord r; r.predicted = -ex.score; return r; });
    CHECK(inverted.accuracy == 0.0);
}

TEST_CASE("perplexity of a uniform model is the vocabulary size") {
    ModelConfig mc;
    mc.vocab_size = 23;
    mc.context_len = 16;
    mc.num_layers = 1;
    mc.model_dim = 8;
    mc.num_heads = 2;
    mc.ffn_dim = 8;
    ModelParams p = ModelParams::zeros(mc);
    // zero unembedding makes every next-token distribution uniform
    std::vector<CotText> corpus{{{1, 2, 3}, {4, 5}}, {{7}, {8, 9, 10, 11}}};
    CHECK(perplexity(p, corpus) == doctest::Approx(23.0).epsilon(1e-12));
    CHECK_THROWS_AS(perplexity(p, std::vector<CotText>{}), InputError);
}

TEST_CASE("degeneracy counts") {
    std::vector<PredictionRecord> rs(4);
    for (auto& r : rs) r.cot = TokenSeq{1, 2, 3};
    auto ok = cot_degeneracy_stats(rs);
    CHECK(ok.missing_delimiter_fraction == 0.0);
    CHECK(ok.mean_cot_length == 3.0);
    rs[2].truncated = true;
    rs[2].truncated_count = 1;
    rs[2].cot = TokenSeq(7, 1);
    auto one = cot_degeneracy_stats(rs);
    CHECK(one.missing_delimiter_fraction == 0.25);
    CHECK(one.truncation_count == 1);
    CHECK(one.max_cot_length == 7);
}

}  // TEST_SUITE
