#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "tract/taskgen.hpp"

using namespace tract;

namespace {

// Ground truth recomputed from raw token ids with the documented layout,
// independently of parse_input and the generator internals.
int count_marked_evidence(const GeneratorConfig& g, const TokenSeq& x) {
    const int evidence_lo = 5 + 4 + 5;
    const int evidence_hi = evidence_lo + g.evidence_tokens;
    std::set<Token> header;
    std::size_t i = 2;
    for (; x[i] != 2; ++i) header.insert(x[i]);
    int count = 0;
    for (++i; i + 1 < x.size(); ++i) {
        if (x[i] >= evidence_lo && x[i] < evidence_hi && header.count(x[i])) ++count;
    }
    return count;
}

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "tract_unit";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_SUITE("taskgen") {

TEST_CASE("vocabulary layout") {
    GeneratorConfig g;
    Vocabulary v(g);
    CHECK(v.size() == 5 + 4 + 5 + 16 + 24 + 8 + 48);
    CHECK(v.delimiter() == TokenSeq{5, 6, 7, 8});
    CHECK(v.score_token(1) == 9);
    CHECK(v.score_token(5) == 13);
    CHECK(v.is_evidence(14));
    CHECK(v.is_rubric(v.size() - 1));
}

TEST_CASE("scores equal the count of header-marked body evidence") {
    GeneratorConfig g;
    auto data = gen_dataset(g, 300, 100);
    for (const auto* ds : {&data.train, &data.test}) {
        for (const auto& ex : ds->examples) {
            CHECK(count_marked_evidence(g, ex.x) == ex.score);
        }
    }
}

TEST_CASE("annotation CoT has one clause per body evidence token") {
    GeneratorConfig g;
    Vocabulary v(g);
    auto data = gen_dataset(g, 200, 10);
    int styled = 0;
    int clauses = 0;
    for (const auto& ex : data.train.examples) {
        REQUIRE(ex.s.has_value());
        REQUIRE(ex.provenance == Provenance::Annotation);
        const TokenSeq& s = *ex.s;
        REQUIRE(s.size() >= 4);
        CHECK(TokenSeq(s.end() - 4, s.end()) == v.delimiter());
        int pos = 0;
        TokenSeq order;
        for (std::size_t i = 0; i + 4 < s.size(); ++i) {
            if (v.is_style(s[i])) ++styled;
            if (s[i] == Vocabulary::kPositive) ++pos;
            if (v.is_evidence(s[i])) order.push_back(s[i]);
        }
        clauses += static_cast<int>(order.size());
        // annotation roles are exact, so the positive count is the score
        CHECK(pos == ex.score);
        TokenSeq body_evidence;
        const auto in = parse_input(v, ex.x);
        for (Token t : in.body)
            if (v.is_evidence(t)) body_evidence.push_back(t);
        CHECK(order == body_evidence);
    }
    const double style_rate = static_cast<double>(styled) / clauses;
    CHECK(style_rate > 0.2);
    CHECK(style_rate < 0.4);
}

TEST_CASE("train and test rubrics are disjoint and scores balanced") {
    GeneratorConfig g;
    auto data = gen_dataset(g, 500, 250);
    std::set<int> train_r, test_r;
    std::map<int, int> hist;
    for (const auto& ex : data.train.examples) {
        train_r.insert(ex.rubric_id);
        hist[ex.score]++;
    }
    for (const auto& ex : data.test.examples) test_r.insert(ex.rubric_id);
    for (int r : test_r) CHECK(train_r.count(r) == 0);
    for (int y = 1; y <= 5; ++y) CHECK(hist[y] == 100);
    CHECK(*test_r.begin() >= g.num_train_rubrics());
}

TEST_CASE("generation is deterministic and seed-sensitive") {
    GeneratorConfig g;
    auto a = gen_dataset(g, 50, 20);
    auto b = gen_dataset(g, 50, 20);
    CHECK(a.train.examples == b.train.examples);
    CHECK(a.test.examples == b.test.examples);
    GeneratorConfig h = g;
    h.seed = 2;
    auto c = gen_dataset(h, 50, 20);
    CHECK_FALSE(a.train.examples == c.train.examples);
    CHECK(generator_fingerprint(g) != generator_fingerprint(h));
    CHECK(generator_fingerprint(g).rfind("gen1-", 0) == 0);
}

TEST_CASE("rubric positive sets are fixed by the config") {
    GeneratorConfig g;
    const auto r = make_rubric(g, 3);
    CHECK(r.positives.size() == 6);
    CHECK(std::is_sorted(r.positives.begin(), r.positives.end()));
    CHECK(make_rubric(g, 3).positives == r.positives);
    CHECK_THROWS_AS(make_rubric(g, g.num_rubrics), DomainError);
}

TEST_CASE("pairwise sets share a rubric and never tie") {
    GeneratorConfig g;
    auto ps = gen_pairwise_set(g, 200, 2);
    for (const auto& p : ps.pairs) {
        CHECK(p.first.rubric_id == p.second.rubric_id);
        CHECK(p.first.rubric_id >= g.num_train_rubrics());
        CHECK(p.gap >= 2);
        CHECK(p.gap == std::abs(p.first.score - p.second.score));
        CHECK((p.winner == 0) == (p.first.score > p.second.score));
        // both sides carry the same header
        const TokenSeq h1(p.first.x.begin(), p.first.x.begin() + 8);
        const TokenSeq h2(p.second.x.begin(), p.second.x.begin() + 8);
        CHECK(h1 == h2);
    }
    CHECK_THROWS_AS(gen_pairwise_set(g, 10, 0), ConfigError);
}

TEST_CASE("pretraining corpus sequences end with a score token") {
    GeneratorConfig g;
    Vocabulary v(g);
    auto count_direct = [&](const GeneratorConfig& c) {
        int direct = 0;
        for (const auto& seq : gen_pretrain_corpus(c, 300, 4)) {
            CHECK(v.score_space().is_score_token(seq.back()));
            for (Token t : seq) CHECK_FALSE(v.is_style(t));
            if (seq[seq.size() - 2] == Vocabulary::kSep) ++direct;
        }
        return direct;
    };
    CHECK(count_direct(g) == 0);
    g.corpus_direct_fraction = 0.2;
    const int direct = count_direct(g);
    CHECK(direct > 30);
    CHECK(direct < 90);
}

TEST_CASE("dataset and pairwise files round trip") {
    GeneratorConfig g;
    auto data = gen_dataset(g, 30, 10);
    const auto path = temp_path("train.jsonl");
    save_dataset(path, data.train);
    const auto back = load_dataset(path);
    CHECK(back.examples == data.train.examples);
    CHECK(back.fingerprint == data.train.fingerprint);
    CHECK(back.split == Split::Train);
    CHECK(*back.score_space == *data.train.score_space);

    auto ps = gen_pairwise_set(g, 12, 1);
    const auto ppath = temp_path("pairs.jsonl");
    save_pairwise(ppath, ps);
    CHECK(load_pairwise(ppath).pairs == ps.pairs);
}

TEST_CASE("malformed dataset files are rejected with the line number") {
    const auto path = temp_path("broken.jsonl");
    {
        std::ofstream out(path);
        out << R"({"type":"header","split":"train","fingerprint":"f","count":1,"score_space":null})"
            << "\n{not json\n";
    }
    try {
        load_dataset(path);
        FAIL("expected an error");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find("broken.jsonl:2:") != std::string::npos);
    }
}

TEST_CASE("config validation") {
    GeneratorConfig g;
    g.positives_per_rubric = 20;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    g = GeneratorConfig{};
    g.style_prob = 1.5;
    CHECK_THROWS_AS(g.validate(), ConfigError);
}

}  // TEST_SUITE
