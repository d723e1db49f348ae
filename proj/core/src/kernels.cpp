#include "kvfold/kernels.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <string>

namespace kvfold {

namespace {

template <typename T>
void finish(std::span<T> out, Precision mode, std::string_view kernel) {
    if (mode == Precision::emulated_bf16) {
        for (auto& v : out) v = round_bf16(v);
    }
    check_finite<T>(out, kernel);
}

}  // namespace

std::string_view to_string(Precision p) noexcept {
    switch (p) {
        case Precision::native_f32: return "f32";
        case Precision::native_f64: return "f64";
        case Precision::emulated_bf16: return "bf16";
    }
    return "?";
}

Precision parse_precision(std::string_view name) {
    if (name == "f32") return Precision::native_f32;
    if (name == "f64") return Precision::native_f64;
    if (name == "bf16") return Precision::emulated_bf16;
    throw ConfigError("unknown precision '" + std::string(name) + "' (expected f32, f64 or bf16)");
}

float round_bf16(float x) noexcept {
    if (std::isnan(x)) return x;
    auto bits = std::bit_cast<std::uint32_t>(x);
    const std::uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb;
    bits &= 0xFFFF0000u;
    return std::bit_cast<float>(bits);
}

double round_bf16(double x) noexcept {
    if (!std::isfinite(x) || x == 0.0) return x;
    int exp = 0;
    const double mant = std::frexp(x, &exp);  // |mant| in [0.5, 1)
    // 8 significant bits; nearbyint honours the default ties-to-even mode.
    return std::ldexp(std::nearbyint(std::ldexp(mant, 8)), exp - 8);
}

template <typename T>
Tensor<T> round_emulated_bf16(Tensor<T> x) {
    for (auto& v : x.data()) v = round_bf16(v);
    return x;
}

template <typename T>
void check_finite(std::span<const T> values, std::string_view kernel) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericError(std::string(kernel) + ": non-finite output at index " +
                               std::to_string(i));
        }
    }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Precision mode) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be rank 2");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(k) + " vs " +
                         std::to_string(b.dim(0)) + ")");
    }
    Tensor<T> c = Tensor<T>::matrix(m, n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* pc = c.data().data();
    // i-k-j order: every c[i][j] still accumulates over k = 0, 1, ... in order.
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = pc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = pa[i * k + p];
            const T* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    finish<T>(c.data(), mode, "matmul");
    return c;
}

template <typename T>
void softmax_row(std::span<T> row, std::span<const std::uint8_t> allowed, Precision mode) {
    const bool all = allowed.empty();
    if (!all && allowed.size() != row.size()) throw ShapeError("softmax: mask length mismatch");
    T max_v = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (all || allowed[j]) {
            max_v = any ? std::max(max_v, row[j]) : row[j];
            any = true;
        }
    }
    if (!any) throw ShapeError("softmax: fully-masked row");
    T sum = 0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (all || allowed[j]) {
            row[j] = std::exp(row[j] - max_v);
            sum += row[j];
        } else {
            row[j] = T{0};
        }
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (all || allowed[j]) row[j] *= inv;
    }
    finish<T>(row, mode, "softmax");
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, std::span<const std::uint8_t> mask, Precision mode) {
    if (x.rank() != 2) throw ShapeError("softmax_rows: input must be rank 2");
    if (!mask.empty() && mask.size() != x.size()) throw ShapeError("softmax_rows: mask shape mismatch");
    Tensor<T> out = x;
    const std::size_t cols = x.dim(1);
    for (std::size_t i = 0; i < x.dim(0); ++i) {
        auto row_mask = mask.empty() ? mask : mask.subspan(i * cols, cols);
        softmax_row<T>(out.row(i), row_mask, mode);
    }
    return out;
}

template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::span<const std::int64_t> positions, double theta,
                     Precision mode) {
    if (x.rank() != 3) throw ShapeError("rope: input must be [tokens x heads x d_head]");
    const std::size_t tokens = x.dim(0), heads = x.dim(1), d_head = x.dim(2);
    if (d_head % 2 != 0) throw ShapeError("rope: d_head must be even, got " + std::to_string(d_head));
    if (positions.size() != tokens) throw ShapeError("rope: positions length differs from token count");

    std::vector<double> inv_freq(d_head / 2);
    for (std::size_t i = 0; i < inv_freq.size(); ++i) {
        inv_freq[i] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
    }
    Tensor<T> out = x;
    for (std::size_t t = 0; t < tokens; ++t) {
        const auto pos = static_cast<double>(positions[t]);
        for (std::size_t i = 0; i < d_head / 2; ++i) {
            const double angle = pos * inv_freq[i];
            const T c = static_cast<T>(std::cos(angle));
            const T s = static_cast<T>(std::sin(angle));
            for (std::size_t h = 0; h < heads; ++h) {
                const T x0 = x(t, h, 2 * i);
                const T x1 = x(t, h, 2 * i + 1);
                out(t, h, 2 * i) = x0 * c - x1 * s;
                out(t, h, 2 * i + 1) = x0 * s + x1 * c;
            }
        }
    }
    finish<T>(out.data(), mode, "rope");
    return out;
}

template <typename T>
std::vector<T> rms_norm(std::span<const T> x, std::span<const T> gain, double eps, Precision mode) {
    if (x.size() != gain.size()) throw ShapeError("rms_norm: gain length mismatch");
    T sum_sq = 0;
    for (T v : x) sum_sq += v * v;
    const T mean_sq = x.empty() ? T{0} : sum_sq / static_cast<T>(x.size());
    const T inv = T{1} / std::sqrt(mean_sq + static_cast<T>(eps));
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
    finish<T>(out, mode, "rms_norm");
    return out;
}

template <typename T>
Tensor<T> rms_norm_rows(const Tensor<T>& x, std::span<const T> gain, double eps, Precision mode) {
    if (x.rank() != 2) throw ShapeError("rms_norm_rows: input must be rank 2");
    Tensor<T> out = Tensor<T>::matrix(x.dim(0), x.dim(1));
    for (std::size_t i = 0; i < x.dim(0); ++i) {
        const auto normed = rms_norm<T>(x.row(i), gain, eps, mode);
        std::copy(normed.begin(), normed.end(), out.row(i).begin());
    }
    return out;
}

template <typename T>
Tensor<T> swiglu(const Tensor<T>& gate, const Tensor<T>& up, Precision mode) {
    if (gate.shape() != up.shape()) throw ShapeError("swiglu: gate/up shape mismatch");
    Tensor<T> out = gate;
    auto o = out.data();
    auto u = up.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const T g = o[i];
        o[i] = g / (T{1} + std::exp(-g)) * u[i];
    }
    finish<T>(o, mode, "swiglu");
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Precision mode) {
    if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
    Tensor<T> out = a;
    auto o = out.data();
    auto bb = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bb[i];
    finish<T>(o, mode, "add");
    return out;
}

#define KVFOLD_INSTANTIATE(T)                                                                  \
    template Tensor<T> round_emulated_bf16<T>(Tensor<T>);                                      \
    template void check_finite<T>(std::span<const T>, std::string_view);                       \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, Precision);               \
    template void softmax_row<T>(std::span<T>, std::span<const std::uint8_t>, Precision);      \
    template Tensor<T> softmax_rows<T>(const Tensor<T>&, std::span<const std::uint8_t>,        \
                                       Precision);                                             \
    template Tensor<T> rope_apply<T>(const Tensor<T>&, std::span<const std::int64_t>, double,  \
                                     Precision);                                               \
    template std::vector<T> rms_norm<T>(std::span<const T>, std::span<const T>, double,        \
                                        Precision);                                            \
    template Tensor<T> rms_norm_rows<T>(const Tensor<T>&, std::span<const T>, double,          \
                                        Precision);                                            \
    template Tensor<T> swiglu<T>(const Tensor<T>&, const Tensor<T>&, Precision);               \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&, Precision);

KVFOLD_INSTANTIATE(float)
KVFOLD_INSTANTIATE(double)

#undef KVFOLD_INSTANTIATE

}  // namespace kvfold
