#include <doctest.h>

#include "oracles.hpp"
#include "tract/predictors.hpp"
#include "tract/score_space.hpp"

using namespace tract;

namespace {

ScoreSpace five_point() {
    std::vector<ScoreEntry> e;
    for (int v = 1; v <= 5; ++v) e.push_back({static_cast<double>(v), 10 + v});
    return ScoreSpace(e, TokenSeq{3, 4});
}

}  // namespace

TEST_SUITE("score_space") {

TEST_CASE("encoding is a bijection over the score set") {
    const auto s = five_point();
    for (int v = 1; v <= 5; ++v) {
        CHECK(s.num_of(s.str_of(v)) == v);
        CHECK(s.is_score_token(10 + v));
    }
    CHECK_THROWS_AS(s.str_of(0.0), DomainError);
    CHECK_THROWS_AS(s.str_of(2.5), DomainError);
    CHECK_THROWS_AS(s.num_of(3), DomainError);
    CHECK(ScoreSpace::from_json(s.to_json()) == s);
}

TEST_CASE("construction rejects malformed spaces") {
    CHECK_THROWS_AS(ScoreSpace({{1, 5}, {1, 6}}, TokenSeq{3}), ConfigError);
    CHECK_THROWS_AS(ScoreSpace({{1, 5}, {2, 5}}, TokenSeq{3}), ConfigError);
    CHECK_THROWS_AS(ScoreSpace({{1, 5}, {2, 3}}, TokenSeq{3}), ConfigError);
}

TEST_CASE("raw expectation on the symmetric distribution is 2.7") {
    const auto s = five_point();
    std::vector<double> probs(20, 0.0);
    const double mass[5] = {0.1, 0.2, 0.3, 0.2, 0.1};
    for (int i = 0; i < 5; ++i) probs[static_cast<std::size_t>(11 + i)] = mass[i];
    const auto raw = project_score_dist(probs, s, Projection::Raw);
    CHECK(expected_score(raw, s) == 2.7);
    const auto ren = project_score_dist(probs, s, Projection::Renormalized);
    CHECK(expected_score(ren, s) == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("renormalized expectation matches enumerate-and-dot") {
    const auto s = five_point();
    Rng rng(77);
    std::vector<int> toks;
    std::vector<double> vals;
    for (const auto& e : s.entries()) {
        toks.push_back(e.token);
        vals.push_back(e.value);
    }
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> p(20);
        double z = 0.0;
        for (auto& x : p) {
            x = -std::log(1.0 - rng.uniform());
            z += x;
        }
        for (auto& x : p) x /= z;
        const double got = expected_score(project_score_dist(p, s, Projection::Renormalized), s);
        CHECK(std::abs(got - oracle::expected_value(p, toks, vals, true)) < 1e-12);
        const double raw = expected_score(project_score_dist(p, s, Projection::Raw), s);
        CHECK(std::abs(raw - oracle::expected_value(p, toks, vals, false)) < 1e-12);
        CHECK(got >= 1.0);
        CHECK(got <= 5.0);
    }
}

TEST_CASE("degenerate mass is an error only when renormalizing") {
    const auto s = five_point();
    std::vector<double> p(20, 0.0);
    p[0] = 1.0;
    CHECK_THROWS_AS(project_score_dist(p, s, Projection::Renormalized), DegenerateError);
    CHECK(expected_score(project_score_dist(p, s, Projection::Raw), s) == 0.0);
}

TEST_CASE("mode breaks ties toward the smaller score") {
    const auto s = five_point();
    ScoreDist d{{0.1, 0.35, 0.1, 0.35, 0.1}, Projection::Raw};
    CHECK(mode_score(d, s) == 2.0);
}

TEST_CASE("delimiter location") {
    const auto s = five_point();
    const TokenSeq seq{7, 3, 4, 9, 3, 4, 12};
    CHECK(*find_last_delimiter_end(seq, s.delimiter()) == 6);
    CHECK(*locate_score_position(seq, s) == 6);
    const TokenSeq ends{7, 3, 4};
    CHECK(*find_last_delimiter_end(ends, s.delimiter()) == 3);
    CHECK_FALSE(locate_score_position(ends, s).has_value());
    CHECK_FALSE(find_last_delimiter_end(TokenSeq{3, 9, 4}, s.delimiter()).has_value());
}

TEST_CASE("projection names") {
    CHECK(projection_from_string("raw") == Projection::Raw);
    CHECK(projection_from_string(to_string(Projection::Renormalized)) == Projection::Renormalized);
    CHECK_THROWS_AS(projection_from_string("softmax"), ConfigError);
}

}  // TEST_SUITE
