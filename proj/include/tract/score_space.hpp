#pragma once

#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "tract/common.hpp"

namespace tract {

struct ScoreEntry {
    double value;
    Token token;

    bool operator==(const ScoreEntry&) const = default;
};

enum class Projection { Raw, Renormalized };

const char* to_string(Projection p);
Projection projection_from_string(const std::string& s);

// The finite target set Y, its one-token encodings, and the delimiter that
// closes every rationale.
class ScoreSpace {
public:
    // Throws ConfigError unless values strictly increase and tokens are
    // distinct from each other and from the delimiter.
    ScoreSpace(std::vector<ScoreEntry> entries, TokenSeq delimiter);

    Token str_of(double value) const;  // throws DomainError
    double num_of(Token token) const;  // throws DomainError
    bool is_score_token(Token token) const;
    std::optional<std::size_t> index_of_value(double value) const;

    std::span<const ScoreEntry> entries() const { return entries_; }
    const TokenSeq& delimiter() const { return delimiter_; }
    std::size_t size() const { return entries_.size(); }
    double min_value() const { return entries_.front().value; }
    double max_value() const { return entries_.back().value; }

    nlohmann::json to_json() const;
    static ScoreSpace from_json(const nlohmann::json& j);

    bool operator==(const ScoreSpace&) const = default;

private:
    std::vector<ScoreEntry> entries_;
    TokenSeq delimiter_;
};

struct ScoreDist {
    std::vector<double> probs;  // aligned with ScoreSpace::entries()
    Projection mode = Projection::Raw;
};

// Index one past the final delimiter occurrence (may equal tokens.size()).
std::optional<std::size_t> find_last_delimiter_end(std::span<const Token> tokens,
                                                   const TokenSeq& delimiter);

// Position of the token immediately after the final delimiter; absent when
// the delimiter is missing or nothing follows it.
std::optional<std::size_t> locate_score_position(std::span<const Token> tokens,
                                                 const ScoreSpace& space);

// Throws DegenerateError in renormalized mode when the score mass is < 1e-12.
ScoreDist project_score_dist(std::span<const double> next_token_probs, const ScoreSpace& space,
                             Projection mode);

// sum_y p(y) * y over the projected distribution.
double expected_score(const ScoreDist& dist, const ScoreSpace& space);

// argmax_y p(y); ties go to the smallest y.
double mode_score(const ScoreDist& dist, const ScoreSpace& space);

}  // namespace tract
