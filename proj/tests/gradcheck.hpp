#pragma once

#include <algorithm>
#include <cmath>

#include "tract/objectives.hpp"
#include "tract/taskgen.hpp"

namespace gradcheck {

// 1-layer d=8 model over the task vocabulary. Embeddings are brought to unit
// scale: at the 0.02 init the LayerNorm inputs are so small that the
// O(h^2) central-difference error dominates at h = 1e-3.
inline tract::ModelParams small_model(int vocab_size, std::uint64_t seed) {
    tract::ModelConfig c;
    c.vocab_size = vocab_size;
    c.context_len = 64;
    c.num_layers = 1;
    c.model_dim = 8;
    c.num_heads = 2;
    c.ffn_dim = 32;
    c.seed = seed;
    auto p = tract::init_params(c);
    for (auto& t : p.tensors()) {
        const bool embedding = t.name.find("embedding") != std::string::npos;
        *t.value *= embedding ? 50.0 : 5.0;
    }
    return p;
}

// ||fd - analytic|| / max(||fd||, ||analytic||) over `probes` coordinates
// drawn with a fixed seed (all coordinates when probes <= 0).
inline double relative_error(tract::ModelParams params, const tract::Example& ex,
                             const tract::ObjectiveSpec& spec, const tract::ScoreSpace& space,
                             double h, int probes, std::uint64_t seed) {
    auto grads = tract::ModelParams::zeros(params.config);
    tract::evaluate_example(params, ex, spec, space, &grads, 1.0);
    auto pt = params.tensors();
    auto gt = grads.tensors();
    std::vector<std::pair<std::size_t, long>> coords;
    for (std::size_t k = 0; k < pt.size(); ++k)
        for (long i = 0; i < pt[k].value->size(); ++i) coords.emplace_back(k, i);
    if (probes > 0 && static_cast<std::size_t>(probes) < coords.size()) {
        tract::Rng rng(seed);
        rng.shuffle(coords);
        coords.resize(static_cast<std::size_t>(probes));
    }
    double diff = 0, na = 0, nf = 0;
    for (auto [k, i] : coords) {
        double* x = pt[k].value->data() + i;
        const double orig = *x;
        *x = orig + h;
        const double up = tract::evaluate_example(params, ex, spec, space).total;
        *x = orig - h;
        const double down = tract::evaluate_example(params, ex, spec, space).total;
        *x = orig;
        const double fd = (up - down) / (2 * h);
        const double an = gt[k].value->data()[i];
        diff += (fd - an) * (fd - an);
        na += an * an;
        nf += fd * fd;
    }
    const double scale = std::max(std::sqrt(na), std::sqrt(nf));
    return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

}  // namespace gradcheck
