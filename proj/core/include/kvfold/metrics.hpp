#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvfold/cache.hpp"
#include "kvfold/fold.hpp"

namespace kvfold {

struct DepthCurve {
    std::vector<std::size_t> depths;
    std::vector<double> drift;      // NLL_kv-fold - NLL_full, mean over windows
    std::vector<double> advantage;  // NLL_isolated - NLL_kv-fold, mean over windows
    std::size_t n_windows = 0;
};

// Throws Error if some (window, depth) lacks one of the three conditions.
DepthCurve drift_advantage(std::span<const EvalRecord> records);

struct PlateauStats {
    double plateau_mean = 0.0;
    double plateau_span = 0.0;  // max - min of drift
    std::size_t n_depths = 0;
};

inline constexpr std::size_t kDefaultPlateauStart = 7;

// Drift statistics over depths >= d_min. Throws if no depth qualifies.
PlateauStats plateau_stats(const DepthCurve& curve, std::size_t d_min = kDefaultPlateauStart);

// 10^9 bytes.
inline constexpr double kBytesPerGB = 1e9;

// n_layers * n_kv_heads * d_head * 2 (K and V) * bytes_per_element.
std::uint64_t kv_bytes_per_token(std::uint64_t n_layers, std::uint64_t n_kv_heads, std::uint64_t d_head,
                                 std::uint64_t bytes_per_element);
std::uint64_t kv_bytes_per_token(const ModelConfig& config, std::uint64_t bytes_per_element);

// Size of a materialized [heads x rows x cols] score matrix.
std::uint64_t attention_scores_bytes(std::uint64_t heads, std::uint64_t rows, std::uint64_t cols,
                                     std::uint64_t bytes_per_element);

// Bytes actually held by the cache tensors.
template <typename T>
std::uint64_t measured_cache_bytes(const KvCache<T>& cache) {
    std::uint64_t total = 0;
    for (const auto& layer : cache.layers()) {
        total += (layer.keys.size() + layer.values.size()) * sizeof(T);
    }
    return total;
}

// Analytical memory for one (model, T, C) setting.
struct MemoryAccounting {
    std::uint64_t n_layers = 0, n_heads = 0, n_kv_heads = 0, d_head = 0, bytes_per_element = 0;
    std::uint64_t total_tokens = 0, chunk_size = 0;
    std::optional<std::uint64_t> streaming_capacity;  // n_sinks + window when compared

    std::uint64_t bytes_per_token() const;
    std::uint64_t fold_cache_bytes() const;          // KV cache after all T tokens
    std::uint64_t full_scores_bytes() const;         // [H, T, T]
    std::uint64_t chunk_scores_bytes() const;        // [H, C, T] at the last step
    std::optional<std::uint64_t> streaming_cache_bytes() const;
    // Mean cache rows visible to a chunk, for the O(C * cache_size) cost model.
    double mean_cache_rows() const;
};

std::string to_json(const DepthCurve& curve, std::optional<PlateauStats> plateau = std::nullopt);
std::string to_csv(const DepthCurve& curve);
std::string to_json(const MemoryAccounting& acct);
std::string to_csv(const MemoryAccounting& acct);

}  // namespace kvfold
