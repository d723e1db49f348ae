#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kvfold/kernels.hpp"
#include "kvfold/model.hpp"

namespace kvfold {

// Carry every row forward untouched.
struct FoldAccumulate {
    friend bool operator==(const FoldAccumulate&, const FoldAccumulate&) = default;
};

// Keep the n_sinks earliest positions plus the `window` most recent ones.
struct SinkWindow {
    std::size_t n_sinks = 4;
    std::size_t window = 1020;
    std::size_t capacity() const noexcept { return n_sinks + window; }
    friend bool operator==(const SinkWindow&, const SinkWindow&) = default;
};

// Round-trip each newly appended row through symmetric absmax intN once.
// Groups are (layer, kv_head, channel) over the rows of one append.
struct QuantRoundTrip {
    int bits = 8;
    friend bool operator==(const QuantRoundTrip&, const QuantRoundTrip&) = default;
};

// Scale every cached value row by gamma once per step. Keys are untouched.
struct UniformDecay {
    double gamma = 1.0;
    friend bool operator==(const UniformDecay&, const UniformDecay&) = default;
};

// Keep the `keep` older rows with the most accumulated attention mass, plus
// the rows of the current step. Ties go to the more recent position.
struct AttentionPrune {
    std::size_t keep = 1024;
    friend bool operator==(const AttentionPrune&, const AttentionPrune&) = default;
};

using CachePolicy =
    std::variant<FoldAccumulate, SinkWindow, QuantRoundTrip, UniformDecay, AttentionPrune>;

// Throws ConfigError for out-of-range parameters.
void validate_policy(const CachePolicy& policy);

// "kv-fold", "sink-window", "quant", "decay", "prune".
std::string policy_name(const CachePolicy& policy);
// Name plus parameters, e.g. "sink-window(sinks=4,window=1020)".
std::string describe_policy(const CachePolicy& policy);

template <typename T>
struct QuantizedGroup {
    std::vector<std::int8_t> codes;
    T scale = 0;  // max|x| / (2^(bits-1) - 1); zero for an all-zero group
};

int quant_max_code(int bits);

template <typename T>
QuantizedGroup<T> quantize_group(std::span<const T> x, int bits);

template <typename T>
std::vector<T> dequantize_group(const QuantizedGroup<T>& q);

// Symmetric absmax round-trip of x[rows x heads x d_head]; one scale per
// (head, channel) column over all rows.
template <typename T>
Tensor<T> quantize_roundtrip(const Tensor<T>& x, int bits);

// Per-layer accumulated K/V with absolute positions, transformed after every
// append by its CachePolicy. All layers always hold the same positions.
template <typename T>
class KvCache {
public:
    KvCache(std::size_t n_layers, std::size_t n_kv_heads, std::size_t d_head, CachePolicy policy,
            Precision precision = Model<T>::default_precision());

    static KvCache for_model(const Model<T>& model, CachePolicy policy) {
        const auto& c = model.config();
        return KvCache(c.n_layers, c.n_kv_heads, c.d_head, std::move(policy), model.precision());
    }

    std::size_t size() const noexcept { return layers_.front().rows(); }
    bool empty() const noexcept { return size() == 0; }
    std::size_t n_layers() const noexcept { return layers_.size(); }
    std::size_t n_kv_heads() const noexcept { return n_kv_heads_; }
    std::size_t d_head() const noexcept { return d_head_; }
    Precision precision() const noexcept { return precision_; }
    const CachePolicy& policy() const noexcept { return policy_; }

    const std::vector<LayerKV<T>>& layers() const noexcept { return layers_; }
    const std::vector<std::int64_t>& positions() const noexcept { return layers_.front().positions; }
    // Accumulated attention mass per cached row (same order as positions()).
    const std::vector<double>& attention_mass() const noexcept { return mass_; }
    // Rows appended since the last apply_policy().
    std::size_t pending_rows() const noexcept { return pending_; }
    // Highest position ever appended, or -1.
    std::int64_t last_position() const noexcept { return last_position_; }

    // Concatenate one LayerKV per layer. New positions must all exceed every
    // position seen so far and be identical across layers.
    void append(std::span<const LayerKV<T>> new_kv);

    // stats[p] += sums[p]; sums has one entry per cached row.
    void record_attention_mass(std::span<const double> sums);

    // Run the policy's post-append transformation once.
    void apply_policy();

    // Rebuild from raw parts (deserialization). Validates every invariant.
    static KvCache from_parts(std::vector<LayerKV<T>> layers, std::vector<double> mass,
                              std::size_t n_kv_heads, std::size_t d_head, CachePolicy policy,
                              Precision precision, std::int64_t last_position);

    friend bool operator==(const KvCache&, const KvCache&) = default;

private:
    void retain(std::span<const std::size_t> rows);
    void check_invariants() const;

    std::vector<LayerKV<T>> layers_;
    std::vector<double> mass_;
    std::size_t n_kv_heads_;
    std::size_t d_head_;
    CachePolicy policy_;
    Precision precision_;
    std::size_t pending_ = 0;
    std::int64_t last_position_ = -1;
};

}  // namespace kvfold
