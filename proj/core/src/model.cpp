#include "kvfold/model.hpp"

#include <cmath>
#include <random>
#include <string>

namespace kvfold {

namespace {

std::string dims(const std::vector<std::size_t>& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

template <typename T>
void expect_shape(const Tensor<T>& t, std::vector<std::size_t> want, const std::string& name) {
    if (t.shape() != want) {
        throw ShapeError(name + ": expected " + dims(want) + ", got " + dims(t.shape()));
    }
    check_finite<T>(t.data(), name);
}

template <typename T>
void expect_len(const std::vector<T>& v, std::size_t want, const std::string& name) {
    if (v.size() != want) {
        throw ShapeError(name + ": expected length " + std::to_string(want) + ", got " +
                         std::to_string(v.size()));
    }
    check_finite<T>(v, name);
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
    if (n_layers == 0) fail("n_layers must be >= 1");
    if (n_heads == 0 || n_kv_heads == 0) fail("head counts must be >= 1");
    if (n_heads % n_kv_heads != 0) fail("n_heads must be divisible by n_kv_heads");
    if (d_head == 0 || d_head % 2 != 0) fail("d_head must be even and >= 2");
    if (d_model != n_heads * d_head) fail("d_model must equal n_heads * d_head");
    if (d_ff == 0) fail("d_ff must be >= 1");
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (max_position < 1) fail("max_position must be >= 1");
    if (!(rope_theta > 0.0)) fail("rope_theta must be positive");
    if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
}

template <typename T>
void Weights<T>::validate(const ModelConfig& c) const {
    const std::size_t dm = c.d_model, q = std::size_t{c.n_heads} * c.d_head, kv = c.kv_width();
    expect_shape(token_embedding, {c.vocab_size, dm}, "token_embedding");
    if (layers.size() != c.n_layers) {
        throw ShapeError("weights hold " + std::to_string(layers.size()) + " layers, config says " +
                         std::to_string(c.n_layers));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string p = "layer." + std::to_string(i) + ".";
        expect_len(l.attn_norm, dm, p + "attn_norm");
        expect_shape(l.wq, {dm, q}, p + "attn.wq");
        expect_shape(l.wk, {dm, kv}, p + "attn.wk");
        expect_shape(l.wv, {dm, kv}, p + "attn.wv");
        expect_shape(l.wo, {q, dm}, p + "attn.wo");
        expect_len(l.mlp_norm, dm, p + "mlp_norm");
        expect_shape(l.w_gate, {dm, c.d_ff}, p + "mlp.w_gate");
        expect_shape(l.w_up, {dm, c.d_ff}, p + "mlp.w_up");
        expect_shape(l.w_down, {c.d_ff, dm}, p + "mlp.w_down");
    }
    expect_len(final_norm, dm, "final_norm");
    expect_shape(lm_head, {dm, c.vocab_size}, "lm_head");
}

template <typename To, typename From>
Weights<To> weights_cast(const Weights<From>& src) {
    auto vec = [](const std::vector<From>& v) { return std::vector<To>(v.begin(), v.end()); };
    Weights<To> out;
    out.token_embedding = tensor_cast<To>(src.token_embedding);
    for (const auto& l : src.layers) {
        out.layers.push_back({vec(l.attn_norm), tensor_cast<To>(l.wq), tensor_cast<To>(l.wk),
                              tensor_cast<To>(l.wv), tensor_cast<To>(l.wo), vec(l.mlp_norm),
                              tensor_cast<To>(l.w_gate), tensor_cast<To>(l.w_up),
                              tensor_cast<To>(l.w_down)});
    }
    out.final_norm = vec(src.final_norm);
    out.lm_head = tensor_cast<To>(src.lm_head);
    return out;
}

template <typename T>
Weights<T> make_synthetic_weights(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto gaussian = [&](std::size_t rows, std::size_t cols, double fan_in) {
        Tensor<T> t = Tensor<T>::matrix(rows, cols);
        const double scale = 1.0 / std::sqrt(fan_in);
        for (auto& v : t.data()) v = static_cast<T>(normal(rng) * scale);
        return t;
    };
    const std::size_t dm = c.d_model, q = std::size_t{c.n_heads} * c.d_head, kv = c.kv_width();
    Weights<T> w;
    // Embedding rows have unit variance per channel (fan_in of a one-hot is 1).
    w.token_embedding = gaussian(c.vocab_size, dm, 1.0);
    for (std::uint32_t i = 0; i < c.n_layers; ++i) {
        LayerWeights<T> l;
        l.attn_norm.assign(dm, T{1});
        l.wq = gaussian(dm, q, static_cast<double>(dm));
        l.wk = gaussian(dm, kv, static_cast<double>(dm));
        l.wv = gaussian(dm, kv, static_cast<double>(dm));
        l.wo = gaussian(q, dm, static_cast<double>(q));
        l.mlp_norm.assign(dm, T{1});
        l.w_gate = gaussian(dm, c.d_ff, static_cast<double>(dm));
        l.w_up = gaussian(dm, c.d_ff, static_cast<double>(dm));
        l.w_down = gaussian(c.d_ff, dm, static_cast<double>(c.d_ff));
        w.layers.push_back(std::move(l));
    }
    w.final_norm.assign(dm, T{1});
    w.lm_head = gaussian(dm, c.vocab_size, static_cast<double>(dm));
    return w;
}

template <typename T>
void LayerKV<T>::validate(std::size_t n_kv_heads, std::size_t d_head) const {
    const std::size_t n = positions.size();
    if (n == 0 && keys.empty() && values.empty()) return;
    const std::vector<std::size_t> want{n, n_kv_heads, d_head};
    if (keys.shape() != want || values.shape() != want) {
        throw ShapeError("layer kv: keys " + dims(keys.shape()) + " / values " +
                         dims(values.shape()) + " do not match " + dims(want));
    }
    for (std::size_t i = 1; i < n; ++i) {
        if (positions[i] <= positions[i - 1]) {
            throw PositionError("layer kv: positions not strictly increasing at row " +
                                std::to_string(i));
        }
    }
}

template <typename T>
Model<T>::Model(ModelConfig config, Weights<T> weights, Precision precision)
    : config_(config), weights_(std::move(weights)), precision_(precision) {
    config_.validate();
    weights_.validate(config_);
    if (precision_ == Precision::native_f64 && sizeof(T) != sizeof(double)) {
        throw ConfigError("f64 precision requires a double-precision model");
    }
    if (precision_ != Precision::native_f64 && sizeof(T) != sizeof(float)) {
        throw ConfigError("f32/bf16 precision requires a single-precision model");
    }
}

template <typename T>
ForwardResult<T> Model<T>::forward_chunk(std::span<const TokenId> tokens,
                                         std::span<const LayerKV<T>> prefix,
                                         std::int64_t start_position,
                                         ForwardOptions options) const {
    const auto& c = config_;
    const std::size_t len = tokens.size();
    if (len == 0) throw ShapeError("forward_chunk: empty chunk");
    if (start_position < 0 ||
        start_position + static_cast<std::int64_t>(len) > static_cast<std::int64_t>(c.max_position)) {
        throw PositionError("forward_chunk: positions " + std::to_string(start_position) + ".." +
                            std::to_string(start_position + static_cast<std::int64_t>(len) - 1) +
                            " exceed max_position " + std::to_string(c.max_position));
    }
    if (!prefix.empty() && prefix.size() != c.n_layers) {
        throw ShapeError("forward_chunk: prefix has " + std::to_string(prefix.size()) +
                         " layers, model has " + std::to_string(c.n_layers));
    }
    for (const auto& layer : prefix) {
        layer.validate(c.n_kv_heads, c.d_head);
        if (!layer.positions.empty() && layer.positions.back() >= start_position) {
            throw PositionError("forward_chunk: prefix position " +
                                std::to_string(layer.positions.back()) +
                                " is not before start_position " + std::to_string(start_position));
        }
    }
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::uint32_t>(t) >= c.vocab_size) {
            throw ShapeError("forward_chunk: token id " + std::to_string(t) + " outside vocab");
        }
    }

    const Precision mode = precision_;
    const bool bf16 = mode == Precision::emulated_bf16;
    const std::size_t dm = c.d_model, dh = c.d_head, n_heads = c.n_heads, n_kv = c.n_kv_heads;
    const std::size_t group = c.group_size();
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    std::vector<std::int64_t> positions(len);
    for (std::size_t i = 0; i < len; ++i) positions[i] = start_position + static_cast<std::int64_t>(i);

    Tensor<T> h = Tensor<T>::matrix(len, dm);
    for (std::size_t i = 0; i < len; ++i) {
        auto src = weights_.token_embedding.row(static_cast<std::size_t>(tokens[i]));
        std::copy(src.begin(), src.end(), h.row(i).begin());
    }

    ForwardResult<T> result;
    result.new_kv.reserve(c.n_layers);
    const std::size_t prefix_rows = prefix.empty() ? 0 : prefix.front().rows();
    if (options.collect_attention) result.attention_mass.assign(prefix_rows + len, 0.0);

    std::vector<T> scores(prefix_rows + len);
    for (std::size_t layer = 0; layer < c.n_layers; ++layer) {
        const auto& lw = weights_.layers[layer];
        const Tensor<T> x = rms_norm_rows(h, std::span<const T>(lw.attn_norm), c.norm_eps, mode);
        Tensor<T> q = rope_apply(matmul(x, lw.wq, mode).reshaped({len, n_heads, dh}), positions,
                                 c.rope_theta, mode);
        Tensor<T> k = rope_apply(matmul(x, lw.wk, mode).reshaped({len, n_kv, dh}), positions,
                                 c.rope_theta, mode);
        Tensor<T> v = matmul(x, lw.wv, mode).reshaped({len, n_kv, dh});

        const LayerKV<T>* pre = prefix.empty() ? nullptr : &prefix[layer];
        if (pre && pre->rows() != prefix_rows) {
            throw ShapeError("forward_chunk: prefix layers differ in length");
        }
        auto key_at = [&](std::size_t j, std::size_t g) -> const T* {
            return j < prefix_rows ? &pre->keys(j, g, 0) : &k(j - prefix_rows, g, 0);
        };
        auto value_at = [&](std::size_t j, std::size_t g) -> const T* {
            return j < prefix_rows ? &pre->values(j, g, 0) : &v(j - prefix_rows, g, 0);
        };

        Tensor<T> attn = Tensor<T>::matrix(len, n_heads * dh);
        for (std::size_t i = 0; i < len; ++i) {
            // Visible keys: the whole prefix plus chunk rows 0..i.
            const std::size_t visible = prefix_rows + i + 1;
            auto row_scores = std::span<T>(scores).first(visible);
            for (std::size_t hd = 0; hd < n_heads; ++hd) {
                const std::size_t g = hd / group;
                const T* qv = &q(i, hd, 0);
                for (std::size_t j = 0; j < visible; ++j) {
                    T s = dot(qv, key_at(j, g), dh) * scale;
                    row_scores[j] = bf16 ? round_bf16(s) : s;
                }
                softmax_row<T>(row_scores, {}, mode);
                T* out = &attn(i, hd * dh);
                for (std::size_t j = 0; j < visible; ++j) {
                    const T p = row_scores[j];
                    const T* vv = value_at(j, g);
                    for (std::size_t d = 0; d < dh; ++d) out[d] += p * vv[d];
                }
                if (options.collect_attention) {
                    for (std::size_t j = 0; j < visible; ++j) {
                        result.attention_mass[j] += static_cast<double>(row_scores[j]);
                    }
                }
            }
        }
        if (bf16) attn = round_emulated_bf16(std::move(attn));
        check_finite<T>(attn.data(), "attention");

        h = add(h, matmul(attn, lw.wo, mode), mode);
        const Tensor<T> xm = rms_norm_rows(h, std::span<const T>(lw.mlp_norm), c.norm_eps, mode);
        const Tensor<T> act = swiglu(matmul(xm, lw.w_gate, mode), matmul(xm, lw.w_up, mode), mode);
        h = add(h, matmul(act, lw.w_down, mode), mode);

        result.new_kv.push_back(LayerKV<T>{std::move(k), std::move(v), positions});
    }

    const Tensor<T> xf = rms_norm_rows(h, std::span<const T>(weights_.final_norm), c.norm_eps, mode);
    result.logits = matmul(xf, weights_.lm_head, mode);
    return result;
}

template <typename T>
TokenId argmax_token(std::span<const T> logits) {
    if (logits.empty()) throw ShapeError("argmax: empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
}

template <typename T>
std::vector<TokenId> greedy_decode(const Model<T>& model, std::vector<LayerKV<T>> cache,
                                   std::span<const T> last_logits, std::int64_t next_position,
                                   std::size_t max_new, std::optional<TokenId> stop) {
    if (cache.empty() || cache.front().rows() == 0) {
        throw ShapeError("greedy_decode: cache is empty");
    }
    std::vector<TokenId> out;
    if (max_new == 0) return out;
    const auto max_pos = static_cast<std::int64_t>(model.config().max_position);
    // Every token but the last is fed back, so the run needs max_new - 1 positions.
    if (next_position + static_cast<std::int64_t>(max_new) - 1 > max_pos) {
        throw PositionError("greedy_decode: " + std::to_string(max_new) +
                            " tokens from position " + std::to_string(next_position) +
                            " overflow max_position " + std::to_string(max_pos));
    }
    std::vector<T> logits(last_logits.begin(), last_logits.end());
    for (std::size_t step = 0; step < max_new; ++step) {
        const TokenId tok = argmax_token<T>(logits);
        if (stop && tok == *stop) break;
        out.push_back(tok);
        if (step + 1 == max_new) break;
        const TokenId input[1] = {tok};
        auto fwd = model.forward_chunk(input, cache, next_position);
        for (std::size_t l = 0; l < cache.size(); ++l) {
            cache[l].keys.append_rows(fwd.new_kv[l].keys);
            cache[l].values.append_rows(fwd.new_kv[l].values);
            cache[l].positions.push_back(next_position);
        }
        auto row = fwd.logits.row(0);
        logits.assign(row.begin(), row.end());
        ++next_position;
    }
    return out;
}

#define KVFOLD_INSTANTIATE(T)                                                                   \
    template struct Weights<T>;                                                                 \
    template struct LayerKV<T>;                                                                 \
    template class Model<T>;                                                                    \
    template Weights<T> make_synthetic_weights<T>(const ModelConfig&, std::uint64_t);           \
    template TokenId argmax_token<T>(std::span<const T>);                                       \
    template std::vector<TokenId> greedy_decode<T>(const Model<T>&, std::vector<LayerKV<T>>,    \
                                                   std::span<const T>, std::int64_t,            \
                                                   std::size_t, std::optional<TokenId>);

KVFOLD_INSTANTIATE(float)
KVFOLD_INSTANTIATE(double)
#undef KVFOLD_INSTANTIATE

template Weights<float> weights_cast<float, float>(const Weights<float>&);
template Weights<double> weights_cast<double, float>(const Weights<float>&);
template Weights<float> weights_cast<float, double>(const Weights<double>&);
template Weights<double> weights_cast<double, double>(const Weights<double>&);

}  // namespace kvfold
