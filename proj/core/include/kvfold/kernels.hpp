#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "kvfold/tensor.hpp"

namespace kvfold {

// Numeric mode of a run. Emulated bf16 computes in f32 and rounds every
// kernel output (not intermediates) to the bf16 grid.
enum class Precision { native_f32, native_f64, emulated_bf16 };

std::string_view to_string(Precision p) noexcept;
Precision parse_precision(std::string_view name);

// Round to the nearest value with an 8-bit significand (bf16), ties to even.
float round_bf16(float x) noexcept;
double round_bf16(double x) noexcept;

template <typename T>
Tensor<T> round_emulated_bf16(Tensor<T> x);

// a[m x k] * b[k x n]. Each output sums over k sequentially from 0.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b,
                 Precision mode = Precision::native_f64);

// In-place softmax of one row restricted to entries with allowed[j] != 0.
// Masked entries are set to exactly zero. Throws if nothing is allowed.
template <typename T>
void softmax_row(std::span<T> row, std::span<const std::uint8_t> allowed,
                 Precision mode = Precision::native_f64);

// Row-wise softmax of x[rows x cols]; mask has one flag per entry
// (nonzero = visible). An empty mask means every entry is visible.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, std::span<const std::uint8_t> mask = {},
                       Precision mode = Precision::native_f64);

// Rotates channel pairs (2i, 2i+1) of x[tokens x heads x d_head] by
// position * theta^(-2i / d_head).
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::span<const std::int64_t> positions,
                     double theta, Precision mode = Precision::native_f64);

// x / sqrt(mean(x^2) + eps) * gain.
template <typename T>
std::vector<T> rms_norm(std::span<const T> x, std::span<const T> gain, double eps,
                        Precision mode = Precision::native_f64);

// rms_norm applied to every row of x[rows x d].
template <typename T>
Tensor<T> rms_norm_rows(const Tensor<T>& x, std::span<const T> gain, double eps,
                        Precision mode = Precision::native_f64);

// silu(gate) * up, elementwise.
template <typename T>
Tensor<T> swiglu(const Tensor<T>& gate, const Tensor<T>& up,
                 Precision mode = Precision::native_f64);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b,
              Precision mode = Precision::native_f64);

// Throws NumericError naming `kernel` if any entry is NaN or Inf.
template <typename T>
void check_finite(std::span<const T> values, std::string_view kernel);

}  // namespace kvfold
