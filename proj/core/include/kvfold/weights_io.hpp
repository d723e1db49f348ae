#pragma once

// Reader/writer for the "KVFW" binary weight file. Layout (little-endian):
//
//   "KVFW" u32 version=1
//   u32 n_layers n_heads n_kv_heads d_model d_head d_ff vocab_size max_position
//   f32 rope_theta f32 norm_eps
//   u32 tensor_count
//   tensor_count x { u32 name_len, name bytes (UTF-8), u8 dtype (0 = f32),
//                    u32 rank, u64 dims[rank], u64 byte_offset }
//   raw row-major f32 payloads at the recorded absolute offsets
//
// Canonical names and shapes are listed in docs/FORMATS.md.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvfold/model.hpp"

namespace kvfold {

inline constexpr std::uint32_t kWeightFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

struct TensorEntry {
    std::string name;
    std::uint8_t dtype = kDtypeF32;
    std::vector<std::uint64_t> shape;
    std::uint64_t offset = 0;
};

struct WeightFileInfo {
    ModelConfig config;
    std::vector<TensorEntry> tensors;
};

// Every tensor the engine needs, in canonical order, with its shape.
std::vector<std::pair<std::string, std::vector<std::uint64_t>>> required_tensors(
    const ModelConfig& config);

std::vector<std::uint8_t> encode_weights(const ModelConfig& config, const Weights<float>& weights);
void save_weights(const std::string& path, const ModelConfig& config, const Weights<float>& weights);

// Full structural check: header invariants, each required tensor present
// exactly once with the right shape and dtype, no unknown or duplicate names,
// payloads inside the file and non-overlapping, every value finite.
// A file that passes is loadable; any failure throws FormatError.
WeightFileInfo validate_weight_file(std::span<const std::uint8_t> bytes);
WeightFileInfo validate_weight_file(const std::string& path);

template <typename T>
struct LoadedWeights {
    ModelConfig config;
    Weights<T> weights;
};

template <typename T>
LoadedWeights<T> decode_weights(std::span<const std::uint8_t> bytes);

template <typename T>
LoadedWeights<T> load_weights(const std::string& path);

}  // namespace kvfold
