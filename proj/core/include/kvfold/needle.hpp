#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvfold/cache.hpp"
#include "kvfold/fold.hpp"

namespace kvfold {

// Uncommon English words used as needle keys.
inline constexpr std::array<std::string_view, 32> kNeedleKeys = {
    "amaranth",  "obsidian",   "halcyon",   "zephyr",    "quixotic", "marigold", "cerulean",
    "vellichor", "saffron",    "tamarind",  "gossamer",  "ephemeral", "labyrinth", "nebula",
    "periwinkle", "sycamore",  "tourmaline", "verdigris", "wisteria", "yarrow",   "alabaster",
    "bergamot",  "chrysalis",  "damask",    "ember",     "filigree", "garnet",   "hematite",
    "isinglass", "juniper",    "kestrel",   "lapis"};

std::string needle_sentence(std::string_view key, std::string_view value);
std::string question_text(std::string_view key);

inline constexpr std::size_t kDefaultDecodeTokens = 30;
inline constexpr std::size_t kFillerOffset = 200;  // bytes skipped at the start of user filler text

struct NeedleSpec {
    std::string key;
    std::string value;             // 5 decimal digits
    std::size_t insert_chunk = 0;  // 0-based data chunk holding the needle
    std::size_t distance = 0;      // last data chunk index - insert_chunk
    std::int64_t span_begin = 0;   // absolute positions [span_begin, span_end)
    std::int64_t span_end = 0;

    friend bool operator==(const NeedleSpec&, const NeedleSpec&) = default;
};

struct NeedleTrial {
    std::uint64_t seed = 0;
    std::size_t total_tokens = 0;  // haystack length T
    std::size_t chunk_size = 0;
    std::size_t n_chunks = 0;      // T / C data chunks; the question follows as chunk n_chunks
    std::vector<NeedleSpec> needles;
    std::vector<TokenId> haystack;

    friend bool operator==(const NeedleTrial&, const NeedleTrial&) = default;
};

// Data chunk that puts a needle `distance` chain transitions before the
// last data chunk. Throws ConfigError when distance >= n_chunks.
std::size_t insert_chunk_for_distance(std::size_t n_chunks, std::size_t distance);

// floor((i + 1) * n_chunks / (k + 1)) for i = 0..k-1.
std::vector<std::size_t> evenly_spaced_chunks(std::size_t n_chunks, std::size_t k);

// One needle per entry of `distances`, keys drawn without replacement.
// `filler` replaces the synthetic prose when given (read from byte 200 on).
NeedleTrial build_trial(std::size_t total_tokens, std::size_t chunk_size,
                        std::span<const std::size_t> distances, std::uint64_t seed,
                        std::optional<std::string_view> filler = std::nullopt);

// K needles at evenly spaced chunks.
NeedleTrial build_multi_trial(std::size_t total_tokens, std::size_t chunk_size, std::size_t k,
                              std::uint64_t seed,
                              std::optional<std::string_view> filler = std::nullopt);

struct DecodeScore {
    std::optional<std::string> extracted;
    bool exact_match = false;
};

// First maximal digit run of exactly five digits, compared with `gold`.
DecodeScore score_decode(std::string_view decoded, std::string_view gold);

struct Retrievability {
    bool resident = false;   // every needle position held by every layer
    bool reachable = false;  // every needle position received attention from the question
};

// `key_positions` / `question_mass` come from the question's forward pass
// (StepOutput); when omitted, reachable falls back to resident because cached
// rows are always visible to a later chunk.
template <typename T>
Retrievability retrievability_proxy(const KvCache<T>& cache, std::int64_t span_begin,
                                    std::int64_t span_end,
                                    std::span<const std::int64_t> key_positions = {},
                                    std::span<const double> question_mass = {});

struct NeedleOutcome {
    NeedleSpec needle;
    bool resident = false;
    bool reachable = false;
    std::string decoded;
    std::optional<std::string> extracted;
    bool exact_match = false;
};

// Fold the haystack under `policy`, then for each needle ask its question
// from a copy of the folded state and greedy-decode `decode_tokens` tokens.
// Requires a byte-level vocab (>= 256).
template <typename T>
std::vector<NeedleOutcome> run_trial(const Model<T>& model, const NeedleTrial& trial,
                                     const CachePolicy& policy,
                                     std::size_t decode_tokens = kDefaultDecodeTokens);

}  // namespace kvfold
