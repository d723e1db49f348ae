#include "kvfold/needle.hpp"

#include <algorithm>
#include <cctype>
#include <random>

#include "kvfold/corpus.hpp"
#include "kvfold/tokenizer.hpp"

namespace kvfold {

std::string needle_sentence(std::string_view key, std::string_view value) {
    return "The magic number for " + std::string(key) + " is " + std::string(value) + ".";
}

std::string question_text(std::string_view key) {
    return "Earlier in the document, what was the magic number associated with " + std::string(key) +
           "? Reply with only the number.";
}

std::size_t insert_chunk_for_distance(std::size_t n_chunks, std::size_t distance) {
    if (distance >= n_chunks) {
        throw ConfigError("needle distance " + std::to_string(distance) + " needs more than " +
                          std::to_string(n_chunks) + " data chunks");
    }
    return n_chunks - 1 - distance;
}

std::vector<std::size_t> evenly_spaced_chunks(std::size_t n_chunks, std::size_t k) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back((i + 1) * n_chunks / (k + 1));
    return out;
}

namespace {

NeedleTrial build(std::size_t total_tokens, std::size_t chunk_size, std::vector<std::size_t> insert_chunks,
                  std::uint64_t seed, std::optional<std::string_view> filler) {
    if (chunk_size == 0 || total_tokens == 0 || total_tokens % chunk_size != 0) {
        throw ConfigError("needle trial: T must be a positive multiple of C");
    }
    if (insert_chunks.empty()) throw ConfigError("needle trial: at least one needle required");
    if (insert_chunks.size() > kNeedleKeys.size()) throw ConfigError("needle trial: too many needles");
    NeedleTrial trial;
    trial.seed = seed;
    trial.total_tokens = total_tokens;
    trial.chunk_size = chunk_size;
    trial.n_chunks = total_tokens / chunk_size;

    auto sorted = insert_chunks;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw ConfigError("needle trial: needles must sit in distinct chunks");
    }

    std::string text;
    if (filler) {
        if (filler->size() < kFillerOffset + total_tokens) {
            throw ConfigError("needle trial: filler text shorter than 200 + T bytes");
        }
        text = std::string(filler->substr(kFillerOffset, total_tokens));
    } else {
        text = synthetic_prose(seed ^ 0x9E3779B97F4A7C15ull, total_tokens);
    }

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> key_order(kNeedleKeys.size());
    for (std::size_t i = 0; i < key_order.size(); ++i) key_order[i] = i;
    std::shuffle(key_order.begin(), key_order.end(), rng);
    std::uniform_int_distribution<int> digits(10000, 99999);

    for (std::size_t i = 0; i < insert_chunks.size(); ++i) {
        NeedleSpec n;
        n.key = std::string(kNeedleKeys[key_order[i]]);
        n.value = std::to_string(digits(rng));
        n.insert_chunk = insert_chunks[i];
        if (n.insert_chunk >= trial.n_chunks) throw ConfigError("needle trial: insert chunk out of range");
        n.distance = trial.n_chunks - 1 - n.insert_chunk;
        const std::string sentence = needle_sentence(n.key, n.value);
        if (sentence.size() > chunk_size) {
            throw ConfigError("needle trial: sentence of " + std::to_string(sentence.size()) +
                              " bytes does not fit a chunk of " + std::to_string(chunk_size));
        }
        const std::size_t begin = n.insert_chunk * chunk_size + (chunk_size - sentence.size()) / 2;
        text.replace(begin, sentence.size(), sentence);
        n.span_begin = static_cast<std::int64_t>(begin);
        n.span_end = static_cast<std::int64_t>(begin + sentence.size());
        trial.needles.push_back(std::move(n));
    }
    trial.haystack = byte_tokenize(text);
    return trial;
}

}  // namespace

NeedleTrial build_trial(std::size_t total_tokens, std::size_t chunk_size,
                        std::span<const std::size_t> distances, std::uint64_t seed,
                        std::optional<std::string_view> filler) {
    if (chunk_size == 0) throw ConfigError("needle trial: C must be >= 1");
    const std::size_t n_chunks = total_tokens / chunk_size;
    std::vector<std::size_t> chunks;
    for (std::size_t d : distances) chunks.push_back(insert_chunk_for_distance(n_chunks, d));
    return build(total_tokens, chunk_size, std::move(chunks), seed, filler);
}

NeedleTrial build_multi_trial(std::size_t total_tokens, std::size_t chunk_size, std::size_t k,
                              std::uint64_t seed, std::optional<std::string_view> filler) {
    if (chunk_size == 0) throw ConfigError("needle trial: C must be >= 1");
    return build(total_tokens, chunk_size, evenly_spaced_chunks(total_tokens / chunk_size, k), seed, filler);
}

DecodeScore score_decode(std::string_view decoded, std::string_view gold) {
    DecodeScore s;
    std::size_t i = 0;
    while (i < decoded.size()) {
        if (!std::isdigit(static_cast<unsigned char>(decoded[i]))) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < decoded.size() && std::isdigit(static_cast<unsigned char>(decoded[j]))) ++j;
        if (j - i == 5) {
            s.extracted = std::string(decoded.substr(i, 5));
            break;
        }
        i = j;
    }
    s.exact_match = s.extracted && *s.extracted == gold;
    return s;
}

template <typename T>
Retrievability retrievability_proxy(const KvCache<T>& cache, std::int64_t span_begin, std::int64_t span_end,
                                    std::span<const std::int64_t> key_positions,
                                    std::span<const double> question_mass) {
    if (!question_mass.empty() && question_mass.size() != key_positions.size()) {
        throw ShapeError("retrievability_proxy: mass and key positions differ in length");
    }
    Retrievability r;
    r.resident = span_end > span_begin;
    for (const auto& layer : cache.layers()) {
        const auto& pos = layer.positions;
        for (std::int64_t p = span_begin; p < span_end && r.resident; ++p) {
            r.resident = std::binary_search(pos.begin(), pos.end(), p);
        }
    }
    if (question_mass.empty()) {
        r.reachable = r.resident;
        return r;
    }
    r.reachable = span_end > span_begin;
    for (std::int64_t p = span_begin; p < span_end && r.reachable; ++p) {
        auto it = std::lower_bound(key_positions.begin(), key_positions.end(), p);
        r.reachable = it != key_positions.end() && *it == p &&
                      question_mass[static_cast<std::size_t>(it - key_positions.begin())] > 0.0;
    }
    return r;
}

template <typename T>
std::vector<NeedleOutcome> run_trial(const Model<T>& model, const NeedleTrial& trial, const CachePolicy& policy,
                                     std::size_t decode_tokens) {
    if (model.config().vocab_size < kByteVocab) {
        throw ConfigError("needle trial: byte tokens need a vocab of at least 256");
    }
    const auto chunks = chunk_sequence(trial.haystack, trial.chunk_size);
    const FoldState<T> folded = fold_run<T>(model, chunks, policy);

    std::vector<NeedleOutcome> outcomes;
    for (const auto& needle : trial.needles) {
        FoldState<T> state = folded;
        NeedleOutcome o;
        o.needle = needle;
        const auto question = byte_tokenize(question_text(needle.key));
        StepOutput<T> step = fold_step<T>(model, state, question);
        const auto proxy = retrievability_proxy(folded.cache, needle.span_begin, needle.span_end,
                                                step.key_positions, step.attention_mass);
        o.resident = proxy.resident;
        o.reachable = proxy.reachable;
        const auto tokens = fold_decode<T>(model, state, step.logits.row(question.size() - 1), decode_tokens);
        o.decoded = byte_detokenize_lossy(tokens);
        const auto score = score_decode(o.decoded, needle.value);
        o.extracted = score.extracted;
        o.exact_match = score.exact_match;
        outcomes.push_back(std::move(o));
    }
    return outcomes;
}

template Retrievability retrievability_proxy<float>(const KvCache<float>&, std::int64_t, std::int64_t,
                                                    std::span<const std::int64_t>, std::span<const double>);
template Retrievability retrievability_proxy<double>(const KvCache<double>&, std::int64_t, std::int64_t,
                                                     std::span<const std::int64_t>, std::span<const double>);
template std::vector<NeedleOutcome> run_trial<float>(const Model<float>&, const NeedleTrial&,
                                                     const CachePolicy&, std::size_t);
template std::vector<NeedleOutcome> run_trial<double>(const Model<double>&, const NeedleTrial&,
                                                      const CachePolicy&, std::size_t);

}  // namespace kvfold
