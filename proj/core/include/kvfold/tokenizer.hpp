#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvfold/model.hpp"

namespace kvfold {

inline constexpr std::uint32_t kByteVocab = 256;

// One token per byte (ids 0..255).
std::vector<TokenId> byte_tokenize(std::string_view text);

// Inverse of byte_tokenize; throws Error for an id outside 0..255.
std::string byte_detokenize(std::span<const TokenId> ids);

// Like byte_detokenize but silently drops ids that are not bytes. Used to
// read model output when the vocab is wider than 256.
std::string byte_detokenize_lossy(std::span<const TokenId> ids);

// Whitespace-separated decimal token ids.
std::vector<TokenId> read_token_file(const std::string& path);
std::vector<TokenId> read_text_file_as_bytes(const std::string& path);

}  // namespace kvfold
