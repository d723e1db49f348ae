#include "kvfold/fold.hpp"

#include <chrono>
#include <cmath>

#include "binary_io.hpp"

namespace kvfold {

std::vector<Chunk> chunk_sequence(std::span<const TokenId> tokens, std::size_t chunk_size) {
    if (chunk_size == 0) throw ConfigError("chunk_sequence: chunk size must be >= 1");
    if (tokens.empty()) throw ConfigError("chunk_sequence: empty token sequence");
    std::vector<Chunk> out;
    out.reserve((tokens.size() + chunk_size - 1) / chunk_size);
    for (std::size_t start = 0; start < tokens.size(); start += chunk_size) {
        const std::size_t len = std::min(chunk_size, tokens.size() - start);
        auto piece = tokens.subspan(start, len);
        out.push_back(Chunk{{piece.begin(), piece.end()}, static_cast<std::int64_t>(start), out.size()});
    }
    return out;
}

template <typename T>
StepOutput<T> fold_step(const Model<T>& model, FoldState<T>& state, std::span<const TokenId> tokens) {
    auto& cache = state.cache;
    StepOutput<T> out;
    out.key_positions = cache.positions();

    const auto t0 = std::chrono::steady_clock::now();
    ForwardResult<T> fwd = model.forward_chunk(tokens, cache.layers(), state.next_position,
                                               ForwardOptions{.collect_attention = true});
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    cache.append(fwd.new_kv);
    cache.record_attention_mass(fwd.attention_mass);
    cache.apply_policy();

    const auto& chunk_positions = fwd.new_kv.front().positions;
    out.key_positions.insert(out.key_positions.end(), chunk_positions.begin(), chunk_positions.end());
    out.attention_mass = std::move(fwd.attention_mass);
    out.logits = std::move(fwd.logits);
    state.next_position += static_cast<std::int64_t>(tokens.size());
    state.depth = state.depth ? *state.depth + 1 : 0;
    return out;
}

template <typename T>
FoldState<T> fold_run(const Model<T>& model, FoldState<T> state, std::span<const Chunk> chunks,
                      const StepCallback<T>& on_step) {
    for (const Chunk& chunk : chunks) {
        if (chunk.start_position != state.next_position) {
            throw PositionError("fold_run: chunk " + std::to_string(chunk.index) + " starts at " +
                                std::to_string(chunk.start_position) + ", expected " +
                                std::to_string(state.next_position));
        }
        StepOutput<T> out = fold_step(model, state, chunk.tokens);
        if (on_step) on_step(chunk, out);
    }
    return state;
}

template <typename T>
FoldState<T> fold_run(const Model<T>& model, std::span<const Chunk> chunks, CachePolicy policy,
                      const StepCallback<T>& on_step) {
    return fold_run(model, FoldState<T>::initial(model, std::move(policy)), chunks, on_step);
}

template <typename T>
std::vector<TokenId> fold_decode(const Model<T>& model, FoldState<T>& state,
                                 std::span<const T> last_logits, std::size_t max_new,
                                 std::optional<TokenId> stop) {
    if (state.cache.empty()) throw ShapeError("fold_decode: cache is empty");
    std::vector<TokenId> out;
    std::vector<T> logits(last_logits.begin(), last_logits.end());
    for (std::size_t step = 0; step < max_new; ++step) {
        const TokenId tok = argmax_token<T>(logits);
        if (stop && tok == *stop) break;
        out.push_back(tok);
        if (step + 1 == max_new) break;
        const TokenId input[1] = {tok};
        auto res = fold_step<T>(model, state, input);
        auto row = res.logits.row(0);
        logits.assign(row.begin(), row.end());
    }
    return out;
}

template <typename T>
double token_nll(std::span<const T> logits, TokenId target) {
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
        throw ShapeError("token_nll: target outside vocab");
    }
    double max_v = static_cast<double>(logits[0]);
    for (T v : logits) max_v = std::max(max_v, static_cast<double>(v));
    double sum = 0.0;
    for (T v : logits) sum += std::exp(static_cast<double>(v) - max_v);
    return max_v + std::log(sum) - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

std::string_view to_string(Condition c) noexcept {
    switch (c) {
        case Condition::full: return "full";
        case Condition::isolated: return "isolated";
        case Condition::kv_fold: return "kv-fold";
    }
    return "?";
}

Condition parse_condition(std::string_view name) {
    if (name == "full") return Condition::full;
    if (name == "isolated") return Condition::isolated;
    if (name == "kv-fold") return Condition::kv_fold;
    throw ConfigError("unknown condition '" + std::string(name) + "'");
}

namespace {

ChunkNll mean_nll(double total, std::size_t count) {
    return ChunkNll{count ? total / static_cast<double>(count) : 0.0, count};
}

}  // namespace

template <typename T>
std::vector<ChunkNll> fold_nll(const Model<T>& model, std::span<const TokenId> tokens,
                               std::size_t chunk_size, const CachePolicy& policy,
                               std::vector<double>* step_seconds) {
    const auto chunks = chunk_sequence(tokens, chunk_size);
    std::vector<ChunkNll> out;
    out.reserve(chunks.size());
    std::vector<T> carry;  // logits of the last token of the previous chunk
    fold_run<T>(model, chunks, policy, [&](const Chunk& chunk, const StepOutput<T>& step) {
        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < chunk.tokens.size(); ++i) {
            if (i == 0) {
                if (carry.empty()) continue;
                total += token_nll<T>(carry, chunk.tokens[0]);
            } else {
                total += token_nll<T>(step.logits.row(i - 1), chunk.tokens[i]);
            }
            ++count;
        }
        auto last = step.logits.row(chunk.tokens.size() - 1);
        carry.assign(last.begin(), last.end());
        out.push_back(mean_nll(total, count));
        if (step_seconds) step_seconds->push_back(step.seconds);
    });
    return out;
}

template <typename T>
std::vector<EvalRecord> eval_three_conditions(const Model<T>& model, std::span<const TokenId> tokens,
                                              std::size_t chunk_size, const std::string& window_id,
                                              EvalOptions options) {
    const auto chunks = chunk_sequence(tokens, chunk_size);
    if (tokens.size() > model.config().max_position) {
        throw PositionError("eval: full condition needs " + std::to_string(tokens.size()) +
                            " positions, model supports " + std::to_string(model.config().max_position));
    }
    const ForwardResult<T> full = model.forward(tokens);
    const auto folded = fold_nll(model, tokens, chunk_size, CachePolicy{FoldAccumulate{}});

    std::vector<EvalRecord> records;
    records.reserve(3 * chunks.size());
    for (const Chunk& chunk : chunks) {
        const auto start = static_cast<std::size_t>(chunk.start_position);
        auto record = [&](Condition c, ChunkNll n) {
            records.push_back(EvalRecord{window_id, chunk.index + 1, chunk.index, c, n.nll, n.tokens_scored});
        };

        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t p = std::max<std::size_t>(start, 1); p < start + chunk.tokens.size(); ++p) {
            total += token_nll<T>(full.logits.row(p - 1), tokens[p]);
            ++count;
        }
        record(Condition::full, mean_nll(total, count));

        const std::int64_t iso_start = options.isolated_absolute_positions ? chunk.start_position : 0;
        const ForwardResult<T> iso = model.forward_chunk(chunk.tokens, {}, iso_start);
        total = 0.0;
        count = 0;
        for (std::size_t i = 1; i < chunk.tokens.size(); ++i) {
            total += token_nll<T>(iso.logits.row(i - 1), chunk.tokens[i]);
            ++count;
        }
        record(Condition::isolated, mean_nll(total, count));

        record(Condition::kv_fold, folded[chunk.index]);
    }
    return records;
}

namespace {

constexpr std::uint32_t kStateVersion = 1;

enum class PolicyTag : std::uint8_t { fold = 0, sink_window = 1, quant = 2, decay = 3, prune = 4 };

void write_policy(detail::ByteWriter& out, const CachePolicy& policy) {
    if (auto* p = std::get_if<FoldAccumulate>(&policy)) {
        (void)p;
        out.u8(static_cast<std::uint8_t>(PolicyTag::fold));
    } else if (auto* s = std::get_if<SinkWindow>(&policy)) {
        out.u8(static_cast<std::uint8_t>(PolicyTag::sink_window));
        out.u64(s->n_sinks);
        out.u64(s->window);
    } else if (auto* q = std::get_if<QuantRoundTrip>(&policy)) {
        out.u8(static_cast<std::uint8_t>(PolicyTag::quant));
        out.u32(static_cast<std::uint32_t>(q->bits));
    } else if (auto* d = std::get_if<UniformDecay>(&policy)) {
        out.u8(static_cast<std::uint8_t>(PolicyTag::decay));
        out.f64(d->gamma);
    } else if (auto* a = std::get_if<AttentionPrune>(&policy)) {
        out.u8(static_cast<std::uint8_t>(PolicyTag::prune));
        out.u64(a->keep);
    }
}

CachePolicy read_policy(detail::ByteReader& in) {
    switch (static_cast<PolicyTag>(in.u8())) {
        case PolicyTag::fold: return FoldAccumulate{};
        case PolicyTag::sink_window: {
            SinkWindow s;
            s.n_sinks = in.u64();
            s.window = in.u64();
            return s;
        }
        case PolicyTag::quant: return QuantRoundTrip{static_cast<int>(in.u32())};
        case PolicyTag::decay: return UniformDecay{in.f64()};
        case PolicyTag::prune: return AttentionPrune{in.u64()};
    }
    throw FormatError("fold state: unknown policy tag");
}

template <typename T>
void write_scalars(detail::ByteWriter& out, std::span<const T> values) {
    for (T v : values) {
        if constexpr (sizeof(T) == sizeof(double)) out.f64(v);
        else out.f32(v);
    }
}

template <typename T>
std::vector<T> read_scalars(detail::ByteReader& in, std::size_t n) {
    std::vector<T> values(n);
    for (auto& v : values) {
        if constexpr (sizeof(T) == sizeof(double)) v = in.f64();
        else v = in.f32();
    }
    return values;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_fold_state(const FoldState<T>& state) {
    const auto& cache = state.cache;
    if (cache.pending_rows() != 0) throw Error("fold state: cannot save with a pending policy step");
    detail::ByteWriter out;
    out.magic("KVFS");
    out.u32(kStateVersion);
    out.u8(sizeof(T) == sizeof(double) ? 1 : 0);
    out.u8(static_cast<std::uint8_t>(cache.precision()));
    write_policy(out, cache.policy());
    out.i64(state.next_position);
    out.u8(state.depth ? 1 : 0);
    out.u64(state.depth.value_or(0));
    out.i64(cache.last_position());
    out.u32(static_cast<std::uint32_t>(cache.n_layers()));
    out.u32(static_cast<std::uint32_t>(cache.n_kv_heads()));
    out.u32(static_cast<std::uint32_t>(cache.d_head()));
    out.u64(cache.size());
    for (auto p : cache.positions()) out.i64(p);
    for (double m : cache.attention_mass()) out.f64(m);
    for (const auto& layer : cache.layers()) {
        write_scalars<T>(out, layer.keys.data());
        write_scalars<T>(out, layer.values.data());
    }
    return out.buffer();
}

template <typename T>
FoldState<T> decode_fold_state(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes.data(), bytes.size(), "fold state");
    in.expect_magic("KVFS");
    if (in.u32() != kStateVersion) throw FormatError("fold state: unsupported version");
    const bool is_f64 = in.u8() == 1;
    if (is_f64 != (sizeof(T) == sizeof(double))) {
        throw FormatError("fold state: scalar type does not match the requested engine type");
    }
    const std::uint8_t precision_tag = in.u8();
    if (precision_tag > static_cast<std::uint8_t>(Precision::emulated_bf16)) {
        throw FormatError("fold state: unknown precision");
    }
    const auto precision = static_cast<Precision>(precision_tag);
    CachePolicy policy = read_policy(in);
    const std::int64_t next_position = in.i64();
    const bool has_depth = in.u8() == 1;
    const std::uint64_t depth = in.u64();
    const std::int64_t last_position = in.i64();
    const std::uint32_t n_layers = in.u32();
    const std::uint32_t n_kv = in.u32();
    const std::uint32_t d_head = in.u32();
    const std::uint64_t rows = in.u64();
    if (n_layers == 0 || rows > bytes.size()) throw FormatError("fold state: corrupt header");

    std::vector<std::int64_t> positions(rows);
    for (auto& p : positions) p = in.i64();
    std::vector<double> mass(rows);
    for (auto& m : mass) m = in.f64();
    std::vector<LayerKV<T>> layers;
    const std::size_t n = rows * n_kv * d_head;
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        LayerKV<T> layer;
        layer.keys = Tensor<T>({rows, n_kv, d_head}, read_scalars<T>(in, n));
        layer.values = Tensor<T>({rows, n_kv, d_head}, read_scalars<T>(in, n));
        layer.positions = positions;
        layers.push_back(std::move(layer));
    }
    if (!in.at_end()) throw FormatError("fold state: trailing bytes");
    FoldState<T> state{KvCache<T>::from_parts(std::move(layers), std::move(mass), n_kv, d_head,
                                              std::move(policy), precision, last_position),
                       next_position, std::nullopt};
    if (has_depth) state.depth = depth;
    return state;
}

template <typename T>
void save_fold_state(const std::string& path, const FoldState<T>& state) {
    detail::write_file(path, encode_fold_state(state));
}

template <typename T>
FoldState<T> load_fold_state(const std::string& path) {
    const auto bytes = detail::read_file(path);
    return decode_fold_state<T>(std::span<const std::uint8_t>(bytes));
}

#define KVFOLD_INSTANTIATE(T)                                                                         \
    template StepOutput<T> fold_step<T>(const Model<T>&, FoldState<T>&, std::span<const TokenId>);   \
    template FoldState<T> fold_run<T>(const Model<T>&, std::span<const Chunk>, CachePolicy,          \
                                      const StepCallback<T>&);                                       \
    template FoldState<T> fold_run<T>(const Model<T>&, FoldState<T>, std::span<const Chunk>,         \
                                      const StepCallback<T>&);                                       \
    template std::vector<TokenId> fold_decode<T>(const Model<T>&, FoldState<T>&, std::span<const T>, \
                                                 std::size_t, std::optional<TokenId>);               \
    template double token_nll<T>(std::span<const T>, TokenId);                                       \
    template std::vector<ChunkNll> fold_nll<T>(const Model<T>&, std::span<const TokenId>,            \
                                               std::size_t, const CachePolicy&,                      \
                                               std::vector<double>*);                                \
    template std::vector<EvalRecord> eval_three_conditions<T>(                                       \
        const Model<T>&, std::span<const TokenId>, std::size_t, const std::string&, EvalOptions);    \
    template std::vector<std::uint8_t> encode_fold_state<T>(const FoldState<T>&);                    \
    template FoldState<T> decode_fold_state<T>(std::span<const std::uint8_t>);                       \
    template void save_fold_state<T>(const std::string&, const FoldState<T>&);                       \
    template FoldState<T> load_fold_state<T>(const std::string&);

KVFOLD_INSTANTIATE(float)
KVFOLD_INSTANTIATE(double)
#undef KVFOLD_INSTANTIATE

}  // namespace kvfold
