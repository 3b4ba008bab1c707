#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tract/model.hpp"

using namespace tract;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 17;
    c.context_len = 24;
    c.num_layers = 2;
    c.model_dim = 8;
    c.num_heads = 2;
    c.ffn_dim = 16;
    c.seed = 42;
    return c;
}

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "tract_unit";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation") {
    ModelConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.num_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    SamplingConfig s;
    CHECK(s.top_p == 0.9);
    CHECK(s.temperature == 1.0);
    CHECK(s.repetition_penalty == 1.03);
    s.top_p = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("init is a pure function of the config") {
    const auto a = init_params(tiny_config());
    const auto b = init_params(tiny_config());
    CHECK(a.bit_equal(b));
    ModelConfig other = tiny_config();
    other.seed = 43;
    CHECK_FALSE(a.bit_equal(init_params(other)));
    CHECK(a.all_finite());
}

TEST_CASE("incremental decoding reproduces the full forward pass bit for bit") {
    auto p = init_params(tiny_config());
    for (auto& t : p.tensors()) *t.value *= 10.0;
    const TokenSeq seq{0, 5, 9, 3, 3, 16, 2, 7, 11, 1};
    const auto cache = forward(p, seq);
    IncrementalDecoder dec(p);
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const auto row = dec.push(seq[t]);
        REQUIRE(row.size() == 17);
        for (std::size_t j = 0; j < row.size(); ++j) {
            CHECK(row[j] == cache.logits(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)));
        }
    }
    // a row's logits do not depend on later tokens
    const TokenSeq longer{0, 5, 9, 3, 3, 16, 2, 7, 11, 1, 4, 4};
    const auto cache2 = forward(p, longer);
    CHECK(cache2.logits.topRows(seq.size()) == cache.logits);
}

TEST_CASE("log-probabilities agree with the forward logits") {
    auto p = init_params(tiny_config());
    for (auto& t : p.tensors()) *t.value *= 5.0;
    const TokenSeq prefix{0, 3, 4};
    const TokenSeq cont{8, 9, 1};
    const auto lps = token_logprobs(p, prefix, cont);
    TokenSeq all = prefix;
    all.insert(all.end(), cont.begin(), cont.end());
    const auto cache = forward(p, all);
    double total = 0.0;
    for (std::size_t i = 0; i < cont.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(prefix.size() + i - 1);
        const auto z = std::span<const double>(cache.logits.data() + row * 17, 17);
        const auto lp = log_softmax_row(z);
        CHECK(lps[i] == doctest::Approx(lp[static_cast<std::size_t>(cont[i])]).epsilon(1e-13));
        total += lps[i];
    }
    CHECK(sequence_logprob(p, prefix, cont) == doctest::Approx(total).epsilon(1e-13));
    const auto next = forward_next_token(p, prefix);
    double mass = 0.0;
    for (double q : next.probs) mass += q;
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("sampler: greedy, nucleus and repetition penalty") {
    Rng rng(1);
    SamplingConfig greedy;
    greedy.greedy = true;
    const std::vector<double> tie{1.0, 3.0, 3.0, 0.5};
    CHECK(sample_from_logits(tie, {}, greedy, rng) == 1);
    CHECK(argmax_token(tie) == 1);

    SamplingConfig narrow;
    narrow.top_p = 0.01;
    narrow.repetition_penalty = 1.0;
    for (int i = 0; i < 50; ++i) {
        CHECK(sample_from_logits(std::vector<double>{0.0, 2.0, 1.0}, {}, narrow, rng) == 1);
    }

    // Penalty 2 on a token with logit 2 halves the logit; on -1 doubles it.
    SamplingConfig pen;
    pen.top_p = 1.0;
    pen.repetition_penalty = 2.0;
    const std::vector<double> z{2.0, 1.0, -1.0};
    const TokenSeq seen{0, 2};
    // Expected distribution after the penalty: softmax(1, 1, -2).
    std::vector<double> want(3);
    softmax_row(std::vector<double>{1.0, 1.0, -2.0}, want);
    std::vector<int> counts(3, 0);
    const int n = 40000;
    for (int i = 0; i < n; ++i) {
        counts[static_cast<std::size_t>(sample_from_logits(z, seen, pen, rng))]++;
    }
    for (int j = 0; j < 3; ++j) {
        const double freq = static_cast<double>(counts[static_cast<std::size_t>(j)]) / n;
        const double sd = std::sqrt(want[static_cast<std::size_t>(j)] * (1 - want[static_cast<std::size_t>(j)]) / n);
        CHECK(std::abs(freq - want[static_cast<std::size_t>(j)]) < 5 * sd);
    }
}

TEST_CASE("nucleus keeps the smallest prefix reaching top_p") {
    // probs 0.5, 0.3, 0.2: top_p 0.7 keeps {0,1} only
    const std::vector<double> z{std::log(0.5), std::log(0.3), std::log(0.2)};
    SamplingConfig s;
    s.top_p = 0.7;
    s.repetition_penalty = 1.0;
    Rng rng(3);
    std::vector<int> counts(3, 0);
    for (int i = 0; i < 20000; ++i) counts[static_cast<std::size_t>(sample_from_logits(z, {}, s, rng))]++;
    CHECK(counts[2] == 0);
    CHECK(std::abs(counts[0] / 20000.0 - 0.625) < 0.02);
}

TEST_CASE("stop rules") {
    const TokenSeq d{5, 6};
    StopRule plus{StopRule::Kind::DelimiterPlusOne, d};
    StopRule at{StopRule::Kind::AtDelimiter, d};
    StopRule none{StopRule::Kind::None, d};
    CHECK(at.should_stop(TokenSeq{1, 5, 6}));
    CHECK_FALSE(plus.should_stop(TokenSeq{1, 5, 6}));
    CHECK(plus.should_stop(TokenSeq{1, 5, 6, 9}));
    CHECK_FALSE(none.should_stop(TokenSeq{5, 6, 9}));
}

TEST_CASE("sample_sequence is deterministic and flags truncation") {
    const auto p = init_params(tiny_config());
    SamplingConfig s;
    s.max_new_tokens = 6;
    const StopRule never{StopRule::Kind::None, {}};
    const auto a = sample_sequence(p, TokenSeq{0, 1}, s, never, 99);
    const auto b = sample_sequence(p, TokenSeq{0, 1}, s, never, 99);
    CHECK(a.tokens == b.tokens);
    CHECK(a.truncated);
    CHECK(a.tokens.size() == 6);
    // context limit also truncates
    s.max_new_tokens = 100;
    const auto c = sample_sequence(p, TokenSeq{0, 1}, s, never, 7);
    CHECK(c.truncated);
    CHECK(c.tokens.size() == 23);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    auto p = init_params(tiny_config());
    const auto before = p;
    auto g = ModelParams::zeros(p.config);
    for (auto& t : g.tensors()) t.value->setConstant(0.3);
    OptimizerState st;
    apply_update(p, g, st, 0.0);
    CHECK(p.bit_equal(before));
    CHECK(st.step == 1);
    apply_update(p, g, st, 1e-2);
    CHECK_FALSE(p.bit_equal(before));
}

TEST_CASE("adam first step moves each value by about the learning rate") {
    auto p = ModelParams::zeros(tiny_config());
    auto g = ModelParams::zeros(p.config);
    for (auto& t : g.tensors()) t.value->setConstant(-4.0);
    OptimizerState st;
    apply_update(p, g, st, 0.01);
    CHECK(p.token_embedding(0, 0) == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("checkpoint round trip is exact") {
    auto p = init_params(tiny_config());
    const auto path = temp_path("rt.ckpt");
    CheckpointInfo info{"p_s", "p0", {{"note", "x"}}};
    save_checkpoint(path, p, info);
    const auto loaded = load_checkpoint(path);
    CHECK(loaded.params.bit_equal(p));
    CHECK(loaded.params.config == p.config);
    CHECK(loaded.info.role == "p_s");
    CHECK(loaded.info.init_from == "p0");
    CHECK(loaded.info.extra["note"] == "x");

    const auto bad = temp_path("bad.ckpt");
    {
        std::ofstream out(bad, std::ios::binary);
        out << "NOTACKPT";
    }
    CHECK_THROWS_AS(load_checkpoint(bad), InputError);
    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), InputError);
}

TEST_CASE("seed-model pretraining lowers corpus loss") {
    ModelConfig c = tiny_config();
    std::vector<TokenSeq> corpus;
    for (int i = 0; i < 20; ++i) corpus.push_back(TokenSeq{0, 3, 4, 5, 6, 7, 8, 1});
    PretrainConfig pc;
    pc.steps = 150;
    pc.learning_rate = 1e-2;
    const auto before = corpus_cross_entropy(init_params(c), corpus);
    const auto r = pretrain_seed(c, corpus, pc);
    CHECK(corpus_cross_entropy(r.params, corpus) < 0.5 * before);
    CHECK(r.final_loss < r.initial_loss);
    const auto again = pretrain_seed(c, corpus, pc);
    CHECK(again.params.bit_equal(r.params));
}

}  // TEST_SUITE
