#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tract/common.hpp"
#include "tract/score_space.hpp"

namespace tract {

// Synthetic rubric-scoring task.
//
// An input lists a rubric's positive-evidence tokens in its header and then
// a shuffled body with exactly five evidence tokens among distractors. The
// ground-truth score is the number of body evidence tokens that the header
// marks as positive. Train and test rubrics are disjoint, so a model has to
// read the header rather than memorize rubric ids.
//
//   x   = BOS rubric_id p_1..p_k BODY body... SEP
//   CoT = { [style] e ROLE } per body evidence token, then the delimiter
struct GeneratorConfig {
    int num_rubrics = 48;
    int evidence_tokens = 16;
    int positives_per_rubric = 6;
    int distractor_tokens = 24;
    int distractor_min = 2;
    int distractor_max = 6;
    int annotation_style_tokens = 8;
    double style_prob = 0.3;
    // Seed-model corpus: probability that a rationale clause carries the
    // wrong role, and fraction of sequences that state the score directly.
    double corpus_role_noise = 0.0;
    double corpus_direct_fraction = 0.0;
    std::uint64_t seed = 1;

    void validate() const;
    int num_test_rubrics() const { return std::max(1, num_rubrics / 4); }
    int num_train_rubrics() const { return num_rubrics - num_test_rubrics(); }

    bool operator==(const GeneratorConfig&) const = default;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

class Vocabulary {
public:
    static constexpr Token kBos = 0;
    static constexpr Token kSep = 1;
    static constexpr Token kBody = 2;
    static constexpr Token kPositive = 3;
    static constexpr Token kNegative = 4;
    static constexpr int kDelimiterLen = 4;
    static constexpr int kNumScores = 5;

    explicit Vocabulary(const GeneratorConfig& config);

    int size() const { return size_; }
    TokenSeq delimiter() const;
    ScoreSpace score_space() const;
    Token score_token(int value) const { return score_begin_ + value - 1; }
    Token evidence(int i) const { return evidence_begin_ + i; }
    Token distractor(int i) const { return distractor_begin_ + i; }
    Token style(int i) const { return style_begin_ + i; }
    Token rubric(int id) const { return rubric_begin_ + id; }

    bool is_evidence(Token t) const { return t >= evidence_begin_ && t < distractor_begin_; }
    bool is_distractor(Token t) const { return t >= distractor_begin_ && t < style_begin_; }
    bool is_style(Token t) const { return t >= style_begin_ && t < rubric_begin_; }
    bool is_rubric(Token t) const { return t >= rubric_begin_ && t < size_; }

private:
    Token delimiter_begin_ = 5;
    Token score_begin_ = 0;
    Token evidence_begin_ = 0;
    Token distractor_begin_ = 0;
    Token style_begin_ = 0;
    Token rubric_begin_ = 0;
    int size_ = 0;
};

struct Rubric {
    int id = 0;
    TokenSeq positives;  // sorted
};

Rubric make_rubric(const GeneratorConfig& config, int rubric_id);

enum class Provenance { None, Annotation, SelfStage1 };
const char* to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct Example {
    std::uint64_t id = 0;
    int rubric_id = 0;
    TokenSeq x;
    std::optional<TokenSeq> s;
    int score = 0;
    Provenance provenance = Provenance::None;

    bool operator==(const Example&) const = default;
};

enum class Split { Train, Test, Pairwise };
const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct Dataset {
    std::vector<Example> examples;
    Split split = Split::Train;
    std::string fingerprint;
    std::optional<ScoreSpace> score_space;

    // Throws InputError on duplicate ids or out-of-range scores.
    void validate() const;
};

struct ExamplePair {
    std::uint64_t id = 0;
    int rubric_id = 0;
    Example first;
    Example second;
    int winner = 0;  // 0 -> first, 1 -> second
    int gap = 0;

    bool operator==(const ExamplePair&) const = default;
};

struct PairwiseSet {
    std::vector<ExamplePair> pairs;
    std::string fingerprint;
    std::optional<ScoreSpace> score_space;
};

// Body tokens of an input built by this generator.
struct ParsedInput {
    Token rubric_token = 0;
    TokenSeq header;
    TokenSeq body;
};
ParsedInput parse_input(const Vocabulary& vocab, const TokenSeq& x);

Example gen_example(const GeneratorConfig& config, int rubric_id, int score, Rng& rng);
TokenSeq annotate_cot(const GeneratorConfig& config, const Example& example, Rng& rng);

struct GeneratedData {
    Dataset train;
    Dataset test;
};

GeneratedData gen_dataset(const GeneratorConfig& config, int n_train, int n_test);
PairwiseSet gen_pairwise_set(const GeneratorConfig& config, int n_pairs, int min_gap = 1);

// Unlabeled sequences for the seed model. Rubrics are freshly drawn per
// sequence and rationales carry no style tokens.
std::vector<TokenSeq> gen_pretrain_corpus(const GeneratorConfig& config, int n,
                                          std::uint64_t seed);

std::string generator_fingerprint(const GeneratorConfig& config);

// Full training sequence [x, s, str(y)] (s omitted when absent).
TokenSeq full_sequence(const Example& ex, const ScoreSpace& space);

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);
void save_pairwise(const std::filesystem::path& path, const PairwiseSet& ps);
PairwiseSet load_pairwise(const std::filesystem::path& path);

}  // namespace tract
