#include "tract/score_space.hpp"

#include <algorithm>
#include <set>

namespace tract {

const char* to_string(Projection p) {
    return p == Projection::Raw ? "raw" : "renormalized";
}

Projection projection_from_string(const std::string& s) {
    if (s == "raw") {
        return Projection::Raw;
    }
    if (s == "renormalized") {
        return Projection::Renormalized;
    }
    throw ConfigError("unknown projection mode '" + s + "' (expected raw|renormalized)");
}

ScoreSpace::ScoreSpace(std::vector<ScoreEntry> entries, TokenSeq delimiter)
    : entries_(std::move(entries)), delimiter_(std::move(delimiter)) {
    if (entries_.empty()) {
        throw ConfigError("score space: no entries");
    }
    if (delimiter_.empty()) {
        throw ConfigError("score space: empty delimiter");
    }
    std::set<Token> tokens;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (i > 0 && !(entries_[i].value > entries_[i - 1].value)) {
            throw ConfigError("score space: values must be strictly increasing");
        }
        if (!tokens.insert(entries_[i].token).second) {
            throw ConfigError("score space: duplicate score token");
        }
    }
    for (Token t : delimiter_) {
        if (tokens.contains(t)) {
            throw ConfigError("score space: delimiter token collides with a score token");
        }
    }
}

Token ScoreSpace::str_of(double value) const {
    for (const auto& e : entries_) {
        if (e.value == value) {
            return e.token;
        }
    }
    throw DomainError("str_of: " + std::to_string(value) + " is not in the score space");
}

double ScoreSpace::num_of(Token token) const {
    for (const auto& e : entries_) {
        if (e.token == token) {
            return e.value;
        }
    }
    throw DomainError("num_of: token " + std::to_string(token) + " is not a score token");
}

bool ScoreSpace::is_score_token(Token token) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [token](const ScoreEntry& e) { return e.token == token; });
}

std::optional<std::size_t> ScoreSpace::index_of_value(double value) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].value == value) {
            return i;
        }
    }
    return std::nullopt;
}

nlohmann::json ScoreSpace::to_json() const {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : entries_) {
        entries.push_back({{"value", e.value}, {"token", e.token}});
    }
    return {{"entries", entries}, {"delimiter", delimiter_}};
}

ScoreSpace ScoreSpace::from_json(const nlohmann::json& j) {
    std::vector<ScoreEntry> entries;
    for (const auto& e : j.at("entries")) {
        entries.push_back({e.at("value").get<double>(), e.at("token").get<Token>()});
    }
    return ScoreSpace(std::move(entries), j.at("delimiter").get<TokenSeq>());
}

std::optional<std::size_t> find_last_delimiter_end(std::span<const Token> tokens,
                                                   const TokenSeq& delimiter) {
    const std::size_t m = delimiter.size();
    if (m == 0 || tokens.size() < m) {
        return std::nullopt;
    }
    for (std::size_t end = tokens.size(); end >= m; --end) {
        if (std::equal(delimiter.begin(), delimiter.end(), tokens.begin() + (end - m))) {
            return end;
        }
    }
    return std::nullopt;
}

std::optional<std::size_t> locate_score_position(std::span<const Token> tokens,
                                                 const ScoreSpace& space) {
    const auto end = find_last_delimiter_end(tokens, space.delimiter());
    if (!end || *end >= tokens.size()) {
        return std::nullopt;
    }
    return end;
}

ScoreDist project_score_dist(std::span<const double> next_token_probs, const ScoreSpace& space,
                             Projection mode) {
    ScoreDist out;
    out.mode = mode;
    out.probs.reserve(space.size());
    double total = 0.0;
    for (const auto& e : space.entries()) {
        if (e.token < 0 || static_cast<std::size_t>(e.token) >= next_token_probs.size()) {
            throw InputError("project_score_dist: score token outside the distribution");
        }
        const double p = next_token_probs[static_cast<std::size_t>(e.token)];
        out.probs.push_back(p);
        total += p;
    }
    if (mode == Projection::Renormalized) {
        if (total < 1e-12) {
            throw DegenerateError("project_score_dist: score-token mass below 1e-12");
        }
        for (double& p : out.probs) {
            p /= total;
        }
    }
    return out;
}

double expected_score(const ScoreDist& dist, const ScoreSpace& space) {
    double y = 0.0;
    for (std::size_t i = 0; i < dist.probs.size(); ++i) {
        y += dist.probs[i] * space.entries()[i].value;
    }
    return y;
}

double mode_score(const ScoreDist& dist, const ScoreSpace& space) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < dist.probs.size(); ++i) {
        if (dist.probs[i] > dist.probs[best]) {
            best = i;
        }
    }
    return space.entries()[best].value;
}

}  // namespace tract
