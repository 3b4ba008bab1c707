#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "tract/objectives.hpp"

using namespace tract;

namespace {

struct Fixture {
    GeneratorConfig g;
    Vocabulary v{g};
    ScoreSpace space = v.score_space();
    GeneratedData data = gen_dataset(g, 40, 5);
};

}  // namespace

TEST_SUITE("objectives") {

TEST_CASE("finite differences agree with the backward pass") {
    Fixture f;
    const auto p = gradcheck::small_model(f.v.size(), 17);
    for (Objective o : {Objective::CeScore, Objective::CeCot, Objective::Raft, Objective::CotRaft}) {
        for (Projection m : {Projection::Raw, Projection::Renormalized}) {
            ObjectiveSpec spec{o, 0.7, m};
            for (int e = 0; e < 3; ++e) {
                const double err = gradcheck::relative_error(p, f.data.train.examples[e], spec,
                                                             f.space, 1e-3, 300, 100 + e);
                CAPTURE(to_string(o));
                CAPTURE(to_string(m));
                CHECK(err < 1e-4);
            }
        }
    }
}

TEST_CASE("batch gradient is the mean of per-example gradients") {
    Fixture f;
    const auto p = gradcheck::small_model(f.v.size(), 3);
    std::vector<Example> batch(f.data.train.examples.begin(), f.data.train.examples.begin() + 4);
    ObjectiveSpec spec{Objective::CotRaft};
    const auto g = compute_gradients(p, batch, spec, f.space);
    auto manual = ModelParams::zeros(p.config);
    double total = 0.0;
    for (const auto& ex : batch) total += evaluate_example(p, ex, spec, f.space, &manual, 0.25).total;
    CHECK(g.loss.total == doctest::Approx(total / 4).epsilon(1e-14));
    auto mt = manual.tensors();
    auto gt = g.grads.tensors();
    for (std::size_t k = 0; k < mt.size(); ++k) CHECK(mt[k].value->isApprox(*gt[k].value, 1e-13));
    CHECK(g.loss.per_example.size() == 4);
}

TEST_CASE("zero lambda reduces cot_raft to ce_cot bitwise") {
    Fixture f;
    const auto p = init_params(ModelConfig{f.v.size(), 64, 1, 16, 2, 32, 5});
    for (const auto& ex : f.data.train.examples) {
        const auto a = loss_cot_raft(p, ex.x, *ex.s, ex.score, 0.0, f.space);
        const auto b = loss_ce_cot(p, ex.x, *ex.s, ex.score, f.space);
        CHECK(a.total == b.total);
    }
}

TEST_CASE("components and lambda bookkeeping") {
    Fixture f;
    const auto p = init_params(ModelConfig{f.v.size(), 64, 1, 16, 2, 32, 5});
    const auto& ex = f.data.train.examples[0];
    const auto l = loss_cot_raft(p, ex.x, *ex.s, ex.score, 2.5, f.space);
    CHECK(l.total == doctest::Approx(2.5 * l.sq_component + l.ce_component).epsilon(1e-14));
    CHECK(l.lambda == 2.5);
    // squared term equals (RAIL expectation - y)^2 at the score position
    TokenSeq ctx = ex.x;
    ctx.insert(ctx.end(), ex.s->begin(), ex.s->end());
    const auto next = forward_next_token(p, ctx);
    const double y_hat =
        expected_score(project_score_dist(next.probs, f.space, Projection::Raw), f.space);
    CHECK(l.sq_component == doctest::Approx((y_hat - ex.score) * (y_hat - ex.score)).epsilon(1e-12));
    const auto ce = loss_ce_score(p, ex.x, ex.score, f.space);
    CHECK(ce.sq_component == 0.0);
    CHECK(ce.total == doctest::Approx(-std::log(forward_next_token(p, ex.x).probs[f.space.str_of(ex.score)])));
}

TEST_CASE("raft losses vanish for a confident correct model") {
    // Near-one-hot score distributions make the expectation hit the target.
    Fixture f;
    ModelConfig c{f.v.size(), 64, 1, 8, 2, 8, 1};
    ModelParams p = ModelParams::zeros(c);
    p.unembed_bias(0, f.space.str_of(3)) = 60.0;
    const auto& ex = f.data.train.examples[0];
    const auto r = loss_raft(p, ex.x, 3, f.space);
    CHECK(r.total < 1e-20);
}

TEST_CASE("CoT objectives require a well-formed CoT") {
    Fixture f;
    const auto p = init_params(ModelConfig{f.v.size(), 64, 1, 8, 2, 8, 1});
    Example ex = f.data.train.examples[0];
    ex.s.reset();
    CHECK_THROWS_AS(evaluate_example(p, ex, ObjectiveSpec{Objective::CeCot}, f.space), ConfigError);
    CHECK_NOTHROW(evaluate_example(p, ex, ObjectiveSpec{Objective::Raft}, f.space));
    ex.s = TokenSeq{14, 3};
    CHECK_THROWS_AS(evaluate_example(p, ex, ObjectiveSpec{Objective::CotRaft}, f.space), InputError);
    ex = f.data.train.examples[0];
    CHECK_THROWS_AS(evaluate_example(p, ex, ObjectiveSpec{Objective::CotRaft, -1.0}, f.space),
                    ConfigError);
}

TEST_CASE("log floor clamps and counts") {
    Fixture f;
    ModelConfig c{f.v.size(), 64, 1, 8, 2, 8, 1};
    ModelParams p = ModelParams::zeros(c);
    p.unembed_bias(0, f.space.str_of(1)) = 100.0;
    const auto& ex = f.data.train.examples[0];
    const int y = ex.score == 1 ? 2 : ex.score;
    const auto l = loss_ce_score(p, ex.x, y, f.space);
    CHECK(l.clamp_count == 1);
    CHECK(l.total == doctest::Approx(-std::log(kLogFloor)));
    auto g = compute_gradients(p, std::vector<Example>{ex}, ObjectiveSpec{Objective::CeScore}, f.space);
    CHECK(g.grads.unembed_bias.isZero());
}

TEST_CASE("objective names") {
    for (Objective o : {Objective::CeScore, Objective::CeCot, Objective::Raft, Objective::CotRaft})
        CHECK(objective_from_string(to_string(o)) == o);
    CHECK_THROWS_AS(objective_from_string("mse"), ConfigError);
    CHECK(objective_uses_cot(Objective::CotRaft));
    CHECK_FALSE(objective_uses_cot(Objective::Raft));
}

}  // TEST_SUITE
