#include "kvfold/cache.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace kvfold {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

}  // namespace

void validate_policy(const CachePolicy& policy) {
    std::visit(overloaded{
                   [](const FoldAccumulate&) {},
                   [](const SinkWindow& p) {
                       if (p.capacity() < 1) throw ConfigError("sink-window: n_sinks + window must be >= 1");
                   },
                   [](const QuantRoundTrip& p) {
                       if (p.bits != 4 && p.bits != 8) {
                           throw ConfigError("quant: bits must be 4 or 8, got " + std::to_string(p.bits));
                       }
                   },
                   [](const UniformDecay& p) {
                       if (!(p.gamma > 0.0 && p.gamma <= 1.0)) {
                           throw ConfigError("decay: gamma must lie in (0, 1]");
                       }
                   },
                   [](const AttentionPrune&) {},
               },
               policy);
}

std::string policy_name(const CachePolicy& policy) {
    return std::visit(overloaded{
                          [](const FoldAccumulate&) { return std::string("kv-fold"); },
                          [](const SinkWindow&) { return std::string("sink-window"); },
                          [](const QuantRoundTrip&) { return std::string("quant"); },
                          [](const UniformDecay&) { return std::string("decay"); },
                          [](const AttentionPrune&) { return std::string("prune"); },
                      },
                      policy);
}

std::string describe_policy(const CachePolicy& policy) {
    std::ostringstream os;
    os << policy_name(policy);
    std::visit(overloaded{
                   [](const FoldAccumulate&) {},
                   [&](const SinkWindow& p) { os << "(sinks=" << p.n_sinks << ",window=" << p.window << ")"; },
                   [&](const QuantRoundTrip& p) { os << "(bits=" << p.bits << ")"; },
                   [&](const UniformDecay& p) { os << "(gamma=" << p.gamma << ")"; },
                   [&](const AttentionPrune& p) { os << "(keep=" << p.keep << ")"; },
               },
               policy);
    return os.str();
}

int quant_max_code(int bits) {
    if (bits < 2 || bits > 8) throw ConfigError("quant: unsupported bit width " + std::to_string(bits));
    return (1 << (bits - 1)) - 1;
}

template <typename T>
QuantizedGroup<T> quantize_group(std::span<const T> x, int bits) {
    const int qmax = quant_max_code(bits);
    T absmax = 0;
    for (T v : x) absmax = std::max(absmax, std::abs(v));
    QuantizedGroup<T> q;
    q.codes.assign(x.size(), 0);
    if (absmax == T{0}) return q;
    q.scale = absmax / static_cast<T>(qmax);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T code = std::round(x[i] / q.scale);
        q.codes[i] = static_cast<std::int8_t>(std::clamp(code, static_cast<T>(-qmax), static_cast<T>(qmax)));
    }
    return q;
}

template <typename T>
std::vector<T> dequantize_group(const QuantizedGroup<T>& q) {
    std::vector<T> out(q.codes.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(q.codes[i]) * q.scale;
    return out;
}

template <typename T>
Tensor<T> quantize_roundtrip(const Tensor<T>& x, int bits) {
    if (x.rank() != 3) throw ShapeError("quantize_roundtrip: expected [rows x heads x d_head]");
    const std::size_t rows = x.dim(0), heads = x.dim(1), dh = x.dim(2);
    Tensor<T> out = x;
    std::vector<T> column(rows);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t d = 0; d < dh; ++d) {
            for (std::size_t r = 0; r < rows; ++r) column[r] = x(r, h, d);
            const auto restored = dequantize_group(quantize_group<T>(column, bits));
            for (std::size_t r = 0; r < rows; ++r) out(r, h, d) = restored[r];
        }
    }
    return out;
}

template <typename T>
KvCache<T>::KvCache(std::size_t n_layers, std::size_t n_kv_heads, std::size_t d_head,
                    CachePolicy policy, Precision precision)
    : layers_(n_layers), n_kv_heads_(n_kv_heads), d_head_(d_head), policy_(std::move(policy)),
      precision_(precision) {
    if (n_layers == 0) throw ShapeError("kv cache: needs at least one layer");
    validate_policy(policy_);
    for (auto& l : layers_) {
        l.keys = Tensor<T>({0, n_kv_heads, d_head});
        l.values = Tensor<T>({0, n_kv_heads, d_head});
    }
}

template <typename T>
void KvCache<T>::append(std::span<const LayerKV<T>> new_kv) {
    if (new_kv.size() != layers_.size()) {
        throw ShapeError("kv cache append: got " + std::to_string(new_kv.size()) + " layers, cache has " +
                         std::to_string(layers_.size()));
    }
    const auto& pos = new_kv.front().positions;
    for (const auto& l : new_kv) {
        l.validate(n_kv_heads_, d_head_);
        if (l.positions != pos) throw PositionError("kv cache append: positions differ across layers");
    }
    if (pos.empty()) return;
    if (pos.front() <= last_position_) {
        throw PositionError("kv cache append: position " + std::to_string(pos.front()) +
                            " does not follow last appended position " + std::to_string(last_position_));
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        layers_[l].keys.append_rows(new_kv[l].keys);
        layers_[l].values.append_rows(new_kv[l].values);
        layers_[l].positions.insert(layers_[l].positions.end(), pos.begin(), pos.end());
    }
    mass_.resize(mass_.size() + pos.size(), 0.0);
    pending_ += pos.size();
    last_position_ = pos.back();
}

template <typename T>
void KvCache<T>::record_attention_mass(std::span<const double> sums) {
    if (sums.size() != size()) {
        throw ShapeError("record_attention_mass: " + std::to_string(sums.size()) + " sums for " +
                         std::to_string(size()) + " cached rows");
    }
    for (std::size_t i = 0; i < sums.size(); ++i) {
        if (!(sums[i] >= 0.0)) throw NumericError("record_attention_mass: negative or NaN mass");
        mass_[i] += sums[i];
    }
}

template <typename T>
void KvCache<T>::retain(std::span<const std::size_t> rows) {
    for (auto& l : layers_) {
        l.keys.retain_rows(rows);
        l.values.retain_rows(rows);
        std::vector<std::int64_t> p;
        p.reserve(rows.size());
        for (std::size_t r : rows) p.push_back(l.positions[r]);
        l.positions = std::move(p);
    }
    std::vector<double> m;
    m.reserve(rows.size());
    for (std::size_t r : rows) m.push_back(mass_[r]);
    mass_ = std::move(m);
}

template <typename T>
void KvCache<T>::apply_policy() {
    const std::size_t n = size();
    const std::size_t fresh = std::min(pending_, n);
    pending_ = 0;
    const bool bf16 = precision_ == Precision::emulated_bf16;

    std::visit(
        overloaded{
            [](const FoldAccumulate&) {},
            [&](const SinkWindow& p) {
                if (n <= p.capacity()) return;
                std::vector<std::size_t> rows;
                rows.reserve(p.capacity());
                for (std::size_t i = 0; i < p.n_sinks; ++i) rows.push_back(i);
                for (std::size_t i = n - p.window; i < n; ++i) rows.push_back(i);
                retain(rows);
            },
            [&](const QuantRoundTrip& p) {
                if (fresh == 0) return;
                for (auto& l : layers_) {
                    for (Tensor<T>* t : {&l.keys, &l.values}) {
                        Tensor<T> tail({fresh, n_kv_heads_, d_head_},
                                       std::vector<T>(t->data().end() - static_cast<std::ptrdiff_t>(fresh * t->row_stride()),
                                                      t->data().end()));
                        Tensor<T> restored = quantize_roundtrip(tail, p.bits);
                        if (bf16) restored = round_emulated_bf16(std::move(restored));
                        std::copy(restored.data().begin(), restored.data().end(),
                                  t->data().end() - static_cast<std::ptrdiff_t>(restored.size()));
                    }
                }
            },
            [&](const UniformDecay& p) {
                if (p.gamma == 1.0) return;
                const T g = static_cast<T>(p.gamma);
                for (auto& l : layers_) {
                    for (auto& v : l.values.data()) v = bf16 ? round_bf16(v * g) : v * g;
                }
            },
            [&](const AttentionPrune& p) {
                const std::size_t older = n - fresh;
                if (older <= p.keep) return;
                std::vector<std::size_t> order(older);
                std::iota(order.begin(), order.end(), std::size_t{0});
                // Highest mass first; equal mass prefers the later (more recent) row.
                std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                    if (mass_[a] != mass_[b]) return mass_[a] > mass_[b];
                    return a > b;
                });
                order.resize(p.keep);
                std::sort(order.begin(), order.end());
                for (std::size_t i = older; i < n; ++i) order.push_back(i);
                retain(order);
            },
        },
        policy_);
}

template <typename T>
void KvCache<T>::check_invariants() const {
    const auto& pos = layers_.front().positions;
    for (const auto& l : layers_) {
        l.validate(n_kv_heads_, d_head_);
        if (l.positions != pos) throw FormatError("kv cache: positions differ across layers");
    }
    if (mass_.size() != pos.size()) throw FormatError("kv cache: attention stats length mismatch");
    if (!pos.empty() && pos.back() > last_position_) throw FormatError("kv cache: last position inconsistent");
}

template <typename T>
KvCache<T> KvCache<T>::from_parts(std::vector<LayerKV<T>> layers, std::vector<double> mass,
                                  std::size_t n_kv_heads, std::size_t d_head, CachePolicy policy,
                                  Precision precision, std::int64_t last_position) {
    KvCache cache(layers.size(), n_kv_heads, d_head, std::move(policy), precision);
    for (auto& l : layers) {
        if (l.positions.empty()) {
            l.keys = Tensor<T>({0, n_kv_heads, d_head});
            l.values = Tensor<T>({0, n_kv_heads, d_head});
        }
    }
    cache.layers_ = std::move(layers);
    cache.mass_ = std::move(mass);
    cache.last_position_ = last_position;
    cache.check_invariants();
    return cache;
}

#define KVFOLD_INSTANTIATE(T)                                                      \
    template QuantizedGroup<T> quantize_group<T>(std::span<const T>, int);         \
    template std::vector<T> dequantize_group<T>(const QuantizedGroup<T>&);         \
    template Tensor<T> quantize_roundtrip<T>(const Tensor<T>&, int);               \
    template class KvCache<T>;

KVFOLD_INSTANTIATE(float)
KVFOLD_INSTANTIATE(double)
#undef KVFOLD_INSTANTIATE

}  // namespace kvfold
