#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvfold/kernels.hpp"
#include "kvfold/tensor.hpp"

namespace kvfold {

using TokenId = std::int32_t;

struct ModelConfig {
    std::uint32_t n_layers = 0;
    std::uint32_t n_heads = 0;
    std::uint32_t n_kv_heads = 0;
    std::uint32_t d_model = 0;
    std::uint32_t d_head = 0;
    std::uint32_t d_ff = 0;
    std::uint32_t vocab_size = 0;
    std::uint32_t max_position = 0;
    double rope_theta = 10000.0;
    double norm_eps = 1e-5;

    // Throws ConfigError on a broken architecture (d_model != n_heads * d_head,
    // n_heads not a multiple of n_kv_heads, odd d_head, vocab < 2, ...).
    void validate() const;

    std::size_t group_size() const noexcept { return n_heads / n_kv_heads; }
    std::size_t kv_width() const noexcept { return std::size_t{n_kv_heads} * d_head; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerWeights {
    std::vector<T> attn_norm;  // [d_model]
    Tensor<T> wq;              // [d_model x n_heads*d_head]
    Tensor<T> wk;              // [d_model x n_kv_heads*d_head]
    Tensor<T> wv;              // [d_model x n_kv_heads*d_head]
    Tensor<T> wo;              // [n_heads*d_head x d_model]
    std::vector<T> mlp_norm;   // [d_model]
    Tensor<T> w_gate;          // [d_model x d_ff]
    Tensor<T> w_up;            // [d_model x d_ff]
    Tensor<T> w_down;          // [d_ff x d_model]
};

template <typename T>
struct Weights {
    Tensor<T> token_embedding;  // [vocab x d_model]
    std::vector<LayerWeights<T>> layers;
    std::vector<T> final_norm;  // [d_model]
    Tensor<T> lm_head;          // [d_model x vocab]

    // Throws ShapeError when a tensor disagrees with `config`, NumericError
    // when an entry is not finite.
    void validate(const ModelConfig& config) const;
};

template <typename To, typename From>
Weights<To> weights_cast(const Weights<From>& src);

// Seeded Gaussian init scaled by 1/sqrt(fan_in); norm gains are 1. Values are
// drawn in double and narrowed, so the f32 weights are the rounded f64 ones.
template <typename T>
Weights<T> make_synthetic_weights(const ModelConfig& config, std::uint64_t seed);

// Per-layer keys/values of a run of tokens. Keys carry RoPE already.
template <typename T>
struct LayerKV {
    Tensor<T> keys;    // [seq x n_kv_heads x d_head]
    Tensor<T> values;  // [seq x n_kv_heads x d_head]
    std::vector<std::int64_t> positions;

    std::size_t rows() const noexcept { return positions.size(); }

    // Throws unless keys/values/positions agree and positions strictly increase.
    void validate(std::size_t n_kv_heads, std::size_t d_head) const;

    friend bool operator==(const LayerKV&, const LayerKV&) = default;
};

template <typename T>
struct ForwardResult {
    Tensor<T> logits;                  // [chunk_len x vocab]
    std::vector<LayerKV<T>> new_kv;    // one per layer, chunk rows only
    // Attention probability received by each key (prefix rows, then the
    // chunk's own rows), summed over layers, heads and query rows. Empty
    // unless requested.
    std::vector<double> attention_mass;
};

struct ForwardOptions {
    bool collect_attention = false;
};

template <typename T>
class Model {
public:
    Model(ModelConfig config, Weights<T> weights, Precision precision = default_precision());

    static constexpr Precision default_precision() noexcept {
        return sizeof(T) == sizeof(double) ? Precision::native_f64 : Precision::native_f32;
    }

    const ModelConfig& config() const noexcept { return config_; }
    const Weights<T>& weights() const noexcept { return weights_; }
    Precision precision() const noexcept { return precision_; }

    // One forward pass over `tokens` at absolute positions start_position...,
    // attending to every row of `prefix` plus the chunk itself causally.
    // `prefix` is either empty or holds one LayerKV per layer.
    ForwardResult<T> forward_chunk(std::span<const TokenId> tokens,
                                   std::span<const LayerKV<T>> prefix,
                                   std::int64_t start_position,
                                   ForwardOptions options = {}) const;

    // Full-attention forward of a whole sequence starting at position 0.
    ForwardResult<T> forward(std::span<const TokenId> tokens) const {
        return forward_chunk(tokens, {}, 0);
    }

private:
    ModelConfig config_;
    Weights<T> weights_;
    Precision precision_;
};

// Index of the largest entry; ties resolve to the lowest index.
template <typename T>
TokenId argmax_token(std::span<const T> logits);

// Greedy continuation. The first token is argmax(last_logits); every emitted
// token except the last is fed back as a 1-token chunk at next_position,
// next_position + 1, ... Stops early (without emitting it) on `stop`.
template <typename T>
std::vector<TokenId> greedy_decode(const Model<T>& model, std::vector<LayerKV<T>> cache,
                                   std::span<const T> last_logits, std::int64_t next_position,
                                   std::size_t max_new,
                                   std::optional<TokenId> stop = std::nullopt);

}  // namespace kvfold
