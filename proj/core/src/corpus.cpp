#include "kvfold/corpus.hpp"

#include <array>
#include <random>
#include <string_view>

#include "kvfold/error.hpp"

namespace kvfold {

std::vector<TokenId> synthetic_tokens(const SyntheticCorpusSpec& spec, std::size_t length) {
    if (spec.vocab_size < 2) throw ConfigError("synthetic corpus: vocab must be >= 2");
    std::mt19937_64 rng(spec.seed);
    std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(spec.vocab_size - 1));
    std::vector<TokenId> out;
    out.reserve(length);
    while (out.size() < length) {
        const bool copy = spec.copy_every > 0 && spec.copy_length > 0 && out.size() >= spec.copy_distance &&
                          out.size() % spec.copy_every == 0 && spec.copy_distance > 0;
        if (copy) {
            const std::size_t from = out.size() - spec.copy_distance;
            for (std::size_t i = 0; i < spec.copy_length && out.size() < length; ++i) {
                out.push_back(out[from + i]);
            }
        } else {
            out.push_back(pick(rng));
        }
    }
    return out;
}

std::string synthetic_prose(std::uint64_t seed, std::size_t length) {
    static constexpr std::array<std::string_view, 48> kWords = {
        "the",    "river",  "moved",   "slowly", "past",   "old",     "stone",  "walls",
        "and",    "a",      "quiet",   "wind",   "carried", "voices", "from",   "distant",
        "fields", "where",  "farmers", "worked", "until",  "evening", "light",  "faded",
        "over",   "hills",  "she",     "walked", "along",  "narrow",  "roads",  "thinking",
        "of",     "letters", "never",  "sent",   "while",  "he",      "waited", "by",
        "window", "in",     "house",   "near",   "market", "square",  "long",   "ago"};
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> word(0, kWords.size() - 1);
    std::uniform_int_distribution<int> sentence_len(6, 14);
    std::string out;
    out.reserve(length + 16);
    while (out.size() < length) {
        const int n = sentence_len(rng);
        for (int i = 0; i < n; ++i) {
            std::string w(kWords[word(rng)]);
            if (i == 0) w[0] = static_cast<char>(w[0] - 'a' + 'A');
            out += w;
            out += (i + 1 == n) ? ". " : " ";
        }
    }
    out.resize(length);
    return out;
}

}  // namespace kvfold
