#include "tract/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "tract/hash.hpp"

namespace tract {

namespace {

constexpr std::uint64_t kRubricStream = 0x52554252;
constexpr std::uint64_t kTrainStream = 0x545241;
constexpr std::uint64_t kTestStream = 0x54455354;
constexpr std::uint64_t kPairStream = 0x50414952;

// k distinct items drawn from `pool` (partial Fisher-Yates).
TokenSeq draw_distinct(TokenSeq pool, int k, Rng& rng) {
    for (int i = 0; i < k; ++i) {
        const auto j = static_cast<std::size_t>(i) +
                       static_cast<std::size_t>(rng.below(pool.size() - static_cast<std::size_t>(i)));
        std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    }
    pool.resize(static_cast<std::size_t>(k));
    return pool;
}

TokenSeq build_input(const GeneratorConfig& config, const Vocabulary& vocab, Token rubric_token,
                     const TokenSeq& positives, int score, Rng& rng) {
    TokenSeq negatives_pool;
    for (int i = 0; i < config.evidence_tokens; ++i) {
        const Token t = vocab.evidence(i);
        if (std::find(positives.begin(), positives.end(), t) == positives.end()) {
            negatives_pool.push_back(t);
        }
    }
    TokenSeq body = draw_distinct(positives, score, rng);
    const TokenSeq negatives =
        draw_distinct(negatives_pool, Vocabulary::kNumScores - score, rng);
    body.insert(body.end(), negatives.begin(), negatives.end());
    TokenSeq distractor_pool;
    for (int i = 0; i < config.distractor_tokens; ++i) {
        distractor_pool.push_back(vocab.distractor(i));
    }
    const int n_distractors = rng.range(config.distractor_min, config.distractor_max);
    const TokenSeq distractors = draw_distinct(distractor_pool, n_distractors, rng);
    body.insert(body.end(), distractors.begin(), distractors.end());
    rng.shuffle(body);

    TokenSeq x{Vocabulary::kBos, rubric_token};
    x.insert(x.end(), positives.begin(), positives.end());
    x.push_back(Vocabulary::kBody);
    x.insert(x.end(), body.begin(), body.end());
    x.push_back(Vocabulary::kSep);
    return x;
}

TokenSeq rationale(const GeneratorConfig& config, const Vocabulary& vocab, const TokenSeq& x,
                   double style_prob, double role_noise, Rng& rng) {
    const ParsedInput in = parse_input(vocab, x);
    TokenSeq s;
    for (Token t : in.body) {
        if (!vocab.is_evidence(t)) {
            continue;
        }
        if (config.annotation_style_tokens > 0 && style_prob > 0.0 && rng.bernoulli(style_prob)) {
            s.push_back(vocab.style(
                static_cast<int>(rng.below(static_cast<std::uint64_t>(config.annotation_style_tokens)))));
        }
        bool positive = std::find(in.header.begin(), in.header.end(), t) != in.header.end();
        if (role_noise > 0.0 && rng.bernoulli(role_noise)) {
            positive = !positive;
        }
        s.push_back(t);
        s.push_back(positive ? Vocabulary::kPositive : Vocabulary::kNegative);
    }
    const TokenSeq d = vocab.delimiter();
    s.insert(s.end(), d.begin(), d.end());
    return s;
}

std::vector<int> balanced_scores(int n, Rng& rng) {
    std::vector<int> scores(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        scores[static_cast<std::size_t>(i)] = 1 + i % Vocabulary::kNumScores;
    }
    rng.shuffle(scores);
    return scores;
}

nlohmann::json example_to_json(const Example& ex) {
    nlohmann::json j{{"id", ex.id},
                     {"rubric_id", ex.rubric_id},
                     {"x", ex.x},
                     {"s", nullptr},
                     {"score", ex.score},
                     {"provenance", to_string(ex.provenance)}};
    if (ex.s) {
        j["s"] = *ex.s;
    }
    return j;
}

Example example_from_json(const nlohmann::json& j) {
    Example ex;
    ex.id = j.at("id").get<std::uint64_t>();
    ex.rubric_id = j.at("rubric_id").get<int>();
    ex.x = j.at("x").get<TokenSeq>();
    if (!j.at("s").is_null()) {
        ex.s = j.at("s").get<TokenSeq>();
    }
    ex.score = j.at("score").get<int>();
    ex.provenance = provenance_from_string(j.at("provenance").get<std::string>());
    return ex;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError("cannot open for writing: " + path.string());
    }
    return out;
}

}  // namespace

void GeneratorConfig::validate() const {
    if (num_rubrics < 2) {
        throw ConfigError("generator: num_rubrics must be >= 2");
    }
    if (positives_per_rubric < Vocabulary::kNumScores ||
        evidence_tokens - positives_per_rubric < Vocabulary::kNumScores) {
        throw ConfigError("generator: need >= 5 positive and >= 5 negative evidence tokens");
    }
    if (distractor_min < 0 || distractor_max < distractor_min ||
        distractor_max > distractor_tokens) {
        throw ConfigError("generator: invalid distractor length range");
    }
    if (annotation_style_tokens < 0 || style_prob < 0.0 || style_prob > 1.0) {
        throw ConfigError("generator: invalid style-token settings");
    }
    if (corpus_role_noise < 0.0 || corpus_role_noise > 1.0 || corpus_direct_fraction < 0.0 ||
        corpus_direct_fraction > 1.0) {
        throw ConfigError("generator: corpus probabilities must lie in [0, 1]");
    }
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = nlohmann::json{{"num_rubrics", c.num_rubrics},
                       {"evidence_tokens", c.evidence_tokens},
                       {"positives_per_rubric", c.positives_per_rubric},
                       {"distractor_tokens", c.distractor_tokens},
                       {"distractor_min", c.distractor_min},
                       {"distractor_max", c.distractor_max},
                       {"annotation_style_tokens", c.annotation_style_tokens},
                       {"style_prob", c.style_prob},
                       {"corpus_role_noise", c.corpus_role_noise},
                       {"corpus_direct_fraction", c.corpus_direct_fraction},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    c.num_rubrics = j.value("num_rubrics", c.num_rubrics);
    c.evidence_tokens = j.value("evidence_tokens", c.evidence_tokens);
    c.positives_per_rubric = j.value("positives_per_rubric", c.positives_per_rubric);
    c.distractor_tokens = j.value("distractor_tokens", c.distractor_tokens);
    c.distractor_min = j.value("distractor_min", c.distractor_min);
    c.distractor_max = j.value("distractor_max", c.distractor_max);
    c.annotation_style_tokens = j.value("annotation_style_tokens", c.annotation_style_tokens);
    c.style_prob = j.value("style_prob", c.style_prob);
    c.corpus_role_noise = j.value("corpus_role_noise", c.corpus_role_noise);
    c.corpus_direct_fraction = j.value("corpus_direct_fraction", c.corpus_direct_fraction);
    c.seed = j.value("seed", c.seed);
}

Vocabulary::Vocabulary(const GeneratorConfig& config) {
    score_begin_ = delimiter_begin_ + kDelimiterLen;
    evidence_begin_ = score_begin_ + kNumScores;
    distractor_begin_ = evidence_begin_ + config.evidence_tokens;
    style_begin_ = distractor_begin_ + config.distractor_tokens;
    rubric_begin_ = style_begin_ + config.annotation_style_tokens;
    size_ = rubric_begin_ + config.num_rubrics;
}

TokenSeq Vocabulary::delimiter() const {
    TokenSeq d(kDelimiterLen);
    std::iota(d.begin(), d.end(), delimiter_begin_);
    return d;
}

ScoreSpace Vocabulary::score_space() const {
    std::vector<ScoreEntry> entries;
    for (int v = 1; v <= kNumScores; ++v) {
        entries.push_back({static_cast<double>(v), score_token(v)});
    }
    return ScoreSpace(std::move(entries), delimiter());
}

Rubric make_rubric(const GeneratorConfig& config, int rubric_id) {
    if (rubric_id < 0 || rubric_id >= config.num_rubrics) {
        throw DomainError("rubric id " + std::to_string(rubric_id) + " out of range");
    }
    const Vocabulary vocab(config);
    Rng rng(derive_seed(config.seed, kRubricStream, static_cast<std::uint64_t>(rubric_id)));
    TokenSeq pool;
    for (int i = 0; i < config.evidence_tokens; ++i) {
        pool.push_back(vocab.evidence(i));
    }
    Rubric r{rubric_id, draw_distinct(pool, config.positives_per_rubric, rng)};
    std::sort(r.positives.begin(), r.positives.end());
    return r;
}

const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::None: return "none";
        case Provenance::Annotation: return "annotation";
        case Provenance::SelfStage1: return "self_stage1";
    }
    return "none";
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "none") return Provenance::None;
    if (s == "annotation") return Provenance::Annotation;
    if (s == "self_stage1") return Provenance::SelfStage1;
    throw InputError("unknown provenance '" + s + "'");
}

const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Test: return "test";
        case Split::Pairwise: return "pairwise";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "test") return Split::Test;
    if (s == "pairwise") return Split::Pairwise;
    throw InputError("unknown split '" + s + "'");
}

void Dataset::validate() const {
    std::set<std::uint64_t> ids;
    for (const auto& ex : examples) {
        if (!ids.insert(ex.id).second) {
            throw InputError("dataset: duplicate example id " + std::to_string(ex.id));
        }
        if (score_space && !score_space->index_of_value(ex.score)) {
            throw InputError("dataset: score outside the score space in example " +
                             std::to_string(ex.id));
        }
    }
}

ParsedInput parse_input(const Vocabulary& vocab, const TokenSeq& x) {
    ParsedInput in;
    if (x.size() < 4 || x.front() != Vocabulary::kBos || x.back() != Vocabulary::kSep) {
        throw InputError("parse_input: malformed input sequence");
    }
    in.rubric_token = x[1];
    std::size_t i = 2;
    while (i < x.size() && x[i] != Vocabulary::kBody) {
        in.header.push_back(x[i++]);
    }
    for (++i; i + 1 < x.size(); ++i) {
        in.body.push_back(x[i]);
    }
    (void)vocab;
    return in;
}

Example gen_example(const GeneratorConfig& config, int rubric_id, int score, Rng& rng) {
    if (score < 1 || score > Vocabulary::kNumScores) {
        throw DomainError("gen_example: score " + std::to_string(score) + " outside Y");
    }
    const Vocabulary vocab(config);
    const Rubric rubric = make_rubric(config, rubric_id);
    Example ex;
    ex.rubric_id = rubric_id;
    ex.score = score;
    ex.x = build_input(config, vocab, vocab.rubric(rubric_id), rubric.positives, score, rng);
    return ex;
}

TokenSeq annotate_cot(const GeneratorConfig& config, const Example& example, Rng& rng) {
    const Vocabulary vocab(config);
    return rationale(config, vocab, example.x, config.style_prob, 0.0, rng);
}

GeneratedData gen_dataset(const GeneratorConfig& config, int n_train, int n_test) {
    config.validate();
    if (n_train < 1 || n_test < 1) {
        throw ConfigError("gen_dataset: counts must be >= 1");
    }
    const Vocabulary vocab(config);
    const std::string fp = generator_fingerprint(config);
    GeneratedData out;
    out.train.split = Split::Train;
    out.test.split = Split::Test;
    out.train.fingerprint = fp;
    out.test.fingerprint = fp;
    out.train.score_space = vocab.score_space();
    out.test.score_space = vocab.score_space();

    Rng train_rng(derive_seed(config.seed, kTrainStream));
    const auto train_scores = balanced_scores(n_train, train_rng);
    for (int i = 0; i < n_train; ++i) {
        const int rubric = static_cast<int>(
            train_rng.below(static_cast<std::uint64_t>(config.num_train_rubrics())));
        Example ex = gen_example(config, rubric, train_scores[static_cast<std::size_t>(i)], train_rng);
        ex.id = static_cast<std::uint64_t>(i);
        ex.s = annotate_cot(config, ex, train_rng);
        ex.provenance = Provenance::Annotation;
        out.train.examples.push_back(std::move(ex));
    }

    Rng test_rng(derive_seed(config.seed, kTestStream));
    const auto test_scores = balanced_scores(n_test, test_rng);
    for (int i = 0; i < n_test; ++i) {
        const int rubric = config.num_train_rubrics() +
                           static_cast<int>(test_rng.below(
                               static_cast<std::uint64_t>(config.num_test_rubrics())));
        Example ex = gen_example(config, rubric, test_scores[static_cast<std::size_t>(i)], test_rng);
        ex.id = static_cast<std::uint64_t>(i);
        out.test.examples.push_back(std::move(ex));
    }
    return out;
}

PairwiseSet gen_pairwise_set(const GeneratorConfig& config, int n_pairs, int min_gap) {
    config.validate();
    if (n_pairs < 1) {
        throw ConfigError("gen_pairwise_set: n_pairs must be >= 1");
    }
    if (min_gap < 1 || min_gap >= Vocabulary::kNumScores) {
        throw ConfigError("gen_pairwise_set: min_gap must lie in [1, 4]");
    }
    const Vocabulary vocab(config);
    PairwiseSet out;
    out.fingerprint = generator_fingerprint(config);
    out.score_space = vocab.score_space();
    Rng rng(derive_seed(config.seed, kPairStream, static_cast<std::uint64_t>(min_gap)));
    std::vector<std::pair<int, int>> score_pairs;
    for (int a = 1; a <= Vocabulary::kNumScores; ++a) {
        for (int b = 1; b <= Vocabulary::kNumScores; ++b) {
            if (std::abs(a - b) >= min_gap) {
                score_pairs.emplace_back(a, b);
            }
        }
    }
    for (int i = 0; i < n_pairs; ++i) {
        const int rubric = config.num_train_rubrics() +
                           static_cast<int>(rng.below(
                               static_cast<std::uint64_t>(config.num_test_rubrics())));
        const auto [a, b] = score_pairs[static_cast<std::size_t>(rng.below(score_pairs.size()))];
        ExamplePair p;
        p.id = static_cast<std::uint64_t>(i);
        p.rubric_id = rubric;
        p.first = gen_example(config, rubric, a, rng);
        p.second = gen_example(config, rubric, b, rng);
        p.first.id = 2 * p.id;
        p.second.id = 2 * p.id + 1;
        p.winner = a > b ? 0 : 1;
        p.gap = std::abs(a - b);
        out.pairs.push_back(std::move(p));
    }
    return out;
}

std::vector<TokenSeq> gen_pretrain_corpus(const GeneratorConfig& config, int n,
                                          std::uint64_t seed) {
    config.validate();
    const Vocabulary vocab(config);
    const ScoreSpace space = vocab.score_space();
    Rng rng(derive_seed(seed, 0x434f5250));
    TokenSeq evidence;
    for (int i = 0; i < config.evidence_tokens; ++i) {
        evidence.push_back(vocab.evidence(i));
    }
    std::vector<TokenSeq> corpus;
    corpus.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        TokenSeq positives = draw_distinct(evidence, config.positives_per_rubric, rng);
        std::sort(positives.begin(), positives.end());
        const Token rubric_token =
            vocab.rubric(static_cast<int>(rng.below(static_cast<std::uint64_t>(config.num_rubrics))));
        const int score = rng.range(1, Vocabulary::kNumScores);
        TokenSeq seq = build_input(config, vocab, rubric_token, positives, score, rng);
        if (rng.bernoulli(config.corpus_direct_fraction)) {
            seq.push_back(space.str_of(score));
        } else {
            const TokenSeq s = rationale(config, vocab, seq, 0.0, config.corpus_role_noise, rng);
            int stated = 0;
            for (Token t : s) {
                stated += t == Vocabulary::kPositive ? 1 : 0;
            }
            seq.insert(seq.end(), s.begin(), s.end());
            // noise can mark every clause negative; the scale starts at 1
            seq.push_back(space.str_of(std::max(stated, 1)));
        }
        corpus.push_back(std::move(seq));
    }
    return corpus;
}

std::string generator_fingerprint(const GeneratorConfig& config) {
    const nlohmann::json j = config;
    return "gen1-" + sha256_hex(j.dump()).substr(0, 16);
}

TokenSeq full_sequence(const Example& ex, const ScoreSpace& space) {
    TokenSeq seq = ex.x;
    if (ex.s) {
        seq.insert(seq.end(), ex.s->begin(), ex.s->end());
    }
    seq.push_back(space.str_of(ex.score));
    return seq;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
    auto out = open_out(path);
    nlohmann::json header{{"type", "header"},
                          {"split", to_string(ds.split)},
                          {"fingerprint", ds.fingerprint},
                          {"count", ds.examples.size()},
                          {"score_space", nullptr}};
    if (ds.score_space) {
        header["score_space"] = ds.score_space->to_json();
    }
    out << header.dump() << '\n';
    for (const auto& ex : ds.examples) {
        out << example_to_json(ex).dump() << '\n';
    }
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open dataset: " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw InputError("empty dataset file: " + path.string());
    }
    Dataset ds;
    std::size_t line_no = 1;
    try {
        const auto header = nlohmann::json::parse(line);
        ds.split = split_from_string(header.at("split").get<std::string>());
        ds.fingerprint = header.value("fingerprint", "");
        if (!header.at("score_space").is_null()) {
            ds.score_space = ScoreSpace::from_json(header.at("score_space"));
        }
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) {
                continue;
            }
            ds.examples.push_back(example_from_json(nlohmann::json::parse(line)));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    ds.validate();
    return ds;
}

void save_pairwise(const std::filesystem::path& path, const PairwiseSet& ps) {
    auto out = open_out(path);
    nlohmann::json header{{"type", "header"},
                          {"split", "pairwise"},
                          {"fingerprint", ps.fingerprint},
                          {"count", ps.pairs.size()},
                          {"score_space", nullptr}};
    if (ps.score_space) {
        header["score_space"] = ps.score_space->to_json();
    }
    out << header.dump() << '\n';
    for (const auto& p : ps.pairs) {
        out << nlohmann::json{{"id", p.id},
                              {"rubric_id", p.rubric_id},
                              {"first", example_to_json(p.first)},
                              {"second", example_to_json(p.second)},
                              {"winner", p.winner},
                              {"gap", p.gap}}
                   .dump()
            << '\n';
    }
}

PairwiseSet load_pairwise(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open pairwise set: " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw InputError("empty pairwise file: " + path.string());
    }
    PairwiseSet ps;
    std::size_t line_no = 1;
    try {
        const auto header = nlohmann::json::parse(line);
        ps.fingerprint = header.value("fingerprint", "");
        if (!header.at("score_space").is_null()) {
            ps.score_space = ScoreSpace::from_json(header.at("score_space"));
        }
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) {
                continue;
            }
            const auto j = nlohmann::json::parse(line);
            ExamplePair p;
            p.id = j.at("id").get<std::uint64_t>();
            p.rubric_id = j.at("rubric_id").get<int>();
            p.first = example_from_json(j.at("first"));
            p.second = example_from_json(j.at("second"));
            p.winner = j.at("winner").get<int>();
            p.gap = j.at("gap").get<int>();
            ps.pairs.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    return ps;
}

}  // namespace tract
