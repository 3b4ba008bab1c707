#include <doctest.h>

#include <cmath>

#include "tract/predictors.hpp"
#include "tract/taskgen.hpp"

using namespace tract;

namespace {

struct Fixture {
    GeneratorConfig g;
    Vocabulary v{g};
    ScoreSpace space = v.score_space();
    GeneratedData data = gen_dataset(g, 10, 10);
    ModelParams p = [&] {
        auto m = init_params(ModelConfig{v.size(), 128, 1, 16, 2, 32, 9});
        for (auto& t : m.tensors()) *t.value *= 8.0;
        return m;
    }();
};

// Model that always puts all mass on `token`.
ModelParams constant_model(const ModelConfig& c, Token token) {
    ModelParams p = ModelParams::zeros(c);
    p.unembed_bias(0, token) = 200.0;
    return p;
}

}  // namespace

TEST_SUITE("predictors") {

TEST_CASE("RAIL equals the enumerated expectation at the score position") {
    Fixture f;
    const auto& x = f.data.test.examples[0].x;
    const auto probs = forward_next_token(f.p, x).probs;
    for (Projection m : {Projection::Raw, Projection::Renormalized}) {
        double dot = 0, mass = 0;
        for (const auto& e : f.space.entries()) {
            dot += probs[static_cast<std::size_t>(e.token)] * e.value;
            mass += probs[static_cast<std::size_t>(e.token)];
        }
        const double want = m == Projection::Raw ? dot : dot / mass;
        CHECK(predict_rail(f.p, x, f.space, m).predicted == doctest::Approx(want).epsilon(1e-13));
    }
}

TEST_CASE("mode decoding picks the most likely score") {
    Fixture f;
    ModelConfig c = f.p.config;
    const auto p = constant_model(c, f.space.str_of(4));
    CHECK(predict_mode_no_cot(p, f.data.test.examples[0].x, f.space).predicted == 4.0);
}

TEST_CASE("CoT predictors stop at the delimiter and read the next position") {
    Fixture f;
    // A model that emits only the delimiter's first token never completes it.
    const auto stuck = constant_model(f.p.config, f.space.delimiter()[0]);
    SamplingConfig s;
    s.max_new_tokens = 10;
    const auto r = predict_cot_rail(stuck, f.data.test.examples[0].x, f.space, s, 1);
    CHECK(r.truncated);
    CHECK(r.truncated_count == 1);
    CHECK(r.cot->size() == 10);
    CHECK(r.predicted == doctest::Approx(0.0).epsilon(1e-12));

    const auto r2 = predict_cot_rail(f.p, f.data.test.examples[1].x, f.space, s, 5);
    if (!r2.truncated) {
        const auto& d = f.space.delimiter();
        REQUIRE(r2.cot->size() >= d.size());
        CHECK(TokenSeq(r2.cot->end() - static_cast<long>(d.size()), r2.cot->end()) == d);
        TokenSeq ctx = f.data.test.examples[1].x;
        ctx.insert(ctx.end(), r2.cot->begin(), r2.cot->end());
        CHECK(r2.predicted == doctest::Approx(predict_rail(f.p, ctx, f.space).predicted).epsilon(1e-13));
    }
}

TEST_CASE("K-sample averaging uses derived per-sample seeds") {
    Fixture f;
    SamplingConfig s;
    s.max_new_tokens = 24;
    const auto& x = f.data.test.examples[2].x;
    const std::uint64_t seed = 31;
    const auto multi = predict_cot_rail_multi(f.p, x, f.space, s, seed, 4);
    double total = 0;
    for (std::uint64_t i = 0; i < 4; ++i) {
        total += predict_cot_rail(f.p, x, f.space, s, derive_seed(seed, i)).predicted;
    }
    CHECK(multi.predicted == doctest::Approx(total / 4).epsilon(1e-14));
    CHECK(multi.k_samples == 4);
    const auto one = predict_cot_rail_multi(f.p, x, f.space, s, seed, 1);
    CHECK(one.predicted == predict_cot_rail(f.p, x, f.space, s, derive_seed(seed, 0)).predicted);
    CHECK_THROWS_AS(predict_cot_rail_multi(f.p, x, f.space, s, seed, 0), ConfigError);
}

TEST_CASE("predictions are reproducible") {
    Fixture f;
    PredictorSpec spec;
    spec.k = 3;
    spec.sampling.max_new_tokens = 24;
    for (const auto& ex : f.data.test.examples) {
        const auto a = predict(f.p, ex.x, f.space, spec, derive_seed(7, ex.id));
        const auto b = predict(f.p, ex.x, f.space, spec, derive_seed(7, ex.id));
        CHECK(a.predicted == b.predicted);
        CHECK(a.cot == b.cot);
    }
}

TEST_CASE("renormalized predictions stay inside the score range") {
    Fixture f;
    PredictorSpec spec;
    spec.projection = Projection::Renormalized;
    spec.sampling.max_new_tokens = 24;
    for (const auto& ex : f.data.test.examples) {
        const double y = predict(f.p, ex.x, f.space, spec, ex.id).predicted;
        CHECK(y >= 1.0);
        CHECK(y <= 5.0);
    }
}

TEST_CASE("spec and record serialization") {
    PredictorSpec spec;
    spec.method = Method::ModeCot;
    spec.k = 8;
    spec.seed = 3;
    nlohmann::json j = spec;
    CHECK(j.get<PredictorSpec>() == spec);
    PredictionRecord r;
    r.example_id = 4;
    r.predicted = 2.5;
    r.cot = TokenSeq{1, 2};
    const auto back = PredictionRecord::from_json(r.to_json());
    CHECK(back.cot == r.cot);
    CHECK(back.predicted == 2.5);
    CHECK_THROWS_AS(method_from_string("beam"), ConfigError);
}

}  // TEST_SUITE
