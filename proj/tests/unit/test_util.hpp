#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "kvfold/model.hpp"

namespace kvfold::testing {

inline ModelConfig tiny_config(std::uint32_t layers = 2, std::uint32_t heads = 4, std::uint32_t kv_heads = 2,
                               std::uint32_t d_head = 8, std::uint32_t vocab = 64,
                               std::uint32_t max_position = 4096) {
    ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.n_kv_heads = kv_heads;
    c.d_head = d_head;
    c.d_model = heads * d_head;
    c.d_ff = 2 * c.d_model;
    c.vocab_size = vocab;
    c.max_position = max_position;
    c.rope_theta = 10000.0;
    c.norm_eps = 1e-5;
    return c;
}

template <typename T>
Model<T> synthetic_model(const ModelConfig& c, std::uint64_t seed = 7,
                         Precision p = Model<T>::default_precision()) {
    return Model<T>(c, make_synthetic_weights<T>(c, seed), p);
}

inline std::vector<TokenId> random_tokens(std::size_t n, std::uint32_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab - 1));
    std::vector<TokenId> out(n);
    for (auto& t : out) t = d(rng);
    return out;
}

template <typename T>
Tensor<T> random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, scale);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(d(rng));
    return t;
}

// max |a - b| / max |b|
template <typename A, typename B>
double max_rel_diff(const A& a, const B& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
        den = std::max(den, std::abs(static_cast<double>(b[i])));
    }
    return den > 0 ? num / den : num;
}

}  // namespace kvfold::testing
