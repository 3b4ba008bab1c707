#pragma once

#include <map>

#include "tract/model.hpp"

namespace scripted {

// Bigram model: after token a it emits next[a] with probability ~1. Layer
// LayerNorm gains are zero, so every block passes the residual through.
inline tract::ModelParams bigram(int vocab_size, const std::map<tract::Token, tract::Token>& next) {
    tract::ModelConfig c;
    c.vocab_size = vocab_size;
    c.model_dim = vocab_size;
    c.num_heads = 1;
    c.num_layers = 1;
    c.ffn_dim = 4;
    c.context_len = 128;
    auto p = tract::ModelParams::zeros(c);
    for (int i = 0; i < vocab_size; ++i) p.token_embedding(i, i) = 1.0;
    p.final_gain.setOnes();
    for (auto [from, to] : next) p.unembed(from, to) = 10.0;
    return p;
}

}  // namespace scripted
