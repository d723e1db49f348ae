#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kvfold/model.hpp"

namespace kvfold {

// Seeded token stream with planted long-range repetition: every
// `copy_every` tokens a block of `copy_length` tokens is copied from
// `copy_distance` tokens back, so earlier chunks carry information that
// later chunks can use.
struct SyntheticCorpusSpec {
    std::uint64_t seed = 0;
    std::uint32_t vocab_size = 256;
    std::size_t copy_every = 96;
    std::size_t copy_length = 32;
    std::size_t copy_distance = 512;

    friend bool operator==(const SyntheticCorpusSpec&, const SyntheticCorpusSpec&) = default;
};

std::vector<TokenId> synthetic_tokens(const SyntheticCorpusSpec& spec, std::size_t length);

// Seeded prose-like filler (lowercase words, punctuation, spaces), exactly
// `length` bytes.
std::string synthetic_prose(std::uint64_t seed, std::size_t length);

}  // namespace kvfold
