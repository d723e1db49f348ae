#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvfold/cache.hpp"
#include "kvfold/model.hpp"

namespace kvfold {

struct Chunk {
    std::vector<TokenId> tokens;
    std::int64_t start_position = 0;
    std::size_t index = 0;  // 0-based; equals the chain depth of this chunk
};

// Consecutive, non-overlapping chunks of length C; a short final chunk keeps
// the ragged tail. Throws on an empty sequence or C == 0.
std::vector<Chunk> chunk_sequence(std::span<const TokenId> tokens, std::size_t chunk_size);

// Accumulator of the left fold over chunks.
template <typename T>
struct FoldState {
    KvCache<T> cache;
    std::int64_t next_position = 0;       // tokens consumed so far
    std::optional<std::size_t> depth;     // chunks consumed - 1; empty before the first

    static FoldState initial(const Model<T>& model, CachePolicy policy) {
        return FoldState{KvCache<T>::for_model(model, std::move(policy)), 0, std::nullopt};
    }

    friend bool operator==(const FoldState&, const FoldState&) = default;
};

template <typename T>
struct StepOutput {
    Tensor<T> logits;                        // [chunk_len x vocab]
    std::vector<std::int64_t> key_positions; // keys the chunk attended to (prefix, then chunk)
    std::vector<double> attention_mass;      // mass per key_positions entry
    double seconds = 0.0;                    // wall-clock of the forward pass
};

// One fold update: forward the chunk over the cached prefix, append its KV,
// record attention mass, apply the cache policy. The chunk must start exactly
// at state.next_position.
template <typename T>
StepOutput<T> fold_step(const Model<T>& model, FoldState<T>& state, std::span<const TokenId> tokens);

template <typename T>
using StepCallback = std::function<void(const Chunk&, const StepOutput<T>&)>;

// Left fold over `chunks` from an empty cache.
template <typename T>
FoldState<T> fold_run(const Model<T>& model, std::span<const Chunk> chunks, CachePolicy policy,
                      const StepCallback<T>& on_step = {});

// Continue a fold from a saved state.
template <typename T>
FoldState<T> fold_run(const Model<T>& model, FoldState<T> state, std::span<const Chunk> chunks,
                      const StepCallback<T>& on_step = {});

// Greedy decode under the state's cache policy: each fed-back token is one
// fold step. The first token is argmax(last_logits).
template <typename T>
std::vector<TokenId> fold_decode(const Model<T>& model, FoldState<T>& state,
                                 std::span<const T> last_logits, std::size_t max_new,
                                 std::optional<TokenId> stop = std::nullopt);

// -log softmax(logits)[target], computed in double.
template <typename T>
double token_nll(std::span<const T> logits, TokenId target);

enum class Condition { full, isolated, kv_fold };

std::string_view to_string(Condition c) noexcept;
Condition parse_condition(std::string_view name);

struct EvalRecord {
    std::string window_id;
    std::size_t chunk_index = 0;  // 1-based ordinal of the chunk
    std::size_t depth = 0;        // chunk_index - 1
    Condition condition = Condition::full;
    double nll = 0.0;             // mean nats over scored tokens
    std::size_t tokens_scored = 0;

    friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

struct ChunkNll {
    double nll = 0.0;
    std::size_t tokens_scored = 0;
};

// Per-chunk NLL of a fold under `policy`. Token p is scored in the chunk that
// contains it, from the logits at p - 1; only token 0 is skipped.
template <typename T>
std::vector<ChunkNll> fold_nll(const Model<T>& model, std::span<const TokenId> tokens,
                               std::size_t chunk_size, const CachePolicy& policy,
                               std::vector<double>* step_seconds = nullptr);

struct EvalOptions {
    // Isolated chunks restart positions at 0 unless this is set.
    bool isolated_absolute_positions = false;
};

// Per chunk: full (one unchunked forward), isolated (no prefix, first token
// of every chunk unscored), kv-fold (FoldAccumulate). Records are ordered by
// chunk, then full / isolated / kv-fold.
template <typename T>
std::vector<EvalRecord> eval_three_conditions(const Model<T>& model, std::span<const TokenId> tokens,
                                              std::size_t chunk_size, const std::string& window_id,
                                              EvalOptions options = {});

// Binary checkpoint of a FoldState ("KVFS", same conventions as KVFW).
template <typename T>
std::vector<std::uint8_t> encode_fold_state(const FoldState<T>& state);
template <typename T>
FoldState<T> decode_fold_state(std::span<const std::uint8_t> bytes);
template <typename T>
void save_fold_state(const std::string& path, const FoldState<T>& state);
template <typename T>
FoldState<T> load_fold_state(const std::string& path);

}  // namespace kvfold
