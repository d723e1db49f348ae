#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kvfold/error.hpp"

namespace kvfold {

// Dense row-major tensor of rank 1..3. Rank-2 and rank-3 accessors are the
// common case (activations [tokens x channels], KV rows [seq x heads x d_head]).
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, T fill = T{0})
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

    Tensor(std::vector<std::size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != element_count(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape product " +
                             std::to_string(element_count(shape_)));
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) {
        return Tensor({rows, cols}, fill);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols,
                         std::initializer_list<T> values) {
        return Tensor({rows, cols}, std::vector<T>(values));
    }

    std::size_t rank() const noexcept { return shape_.size(); }
    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& operator()(std::size_t i, std::size_t j) const {
        return data_[i * shape_[1] + j];
    }
    T& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    // Contiguous view of the leading-axis slice `i` (a row of a matrix, or a
    // [heads x d_head] block of a rank-3 tensor).
    std::span<T> row(std::size_t i) {
        const std::size_t stride = row_stride();
        return std::span<T>(data_).subspan(i * stride, stride);
    }
    std::span<const T> row(std::size_t i) const {
        const std::size_t stride = row_stride();
        return std::span<const T>(data_).subspan(i * stride, stride);
    }

    std::size_t row_stride() const noexcept {
        if (shape_.empty()) return 0;
        return std::accumulate(shape_.begin() + 1, shape_.end(), std::size_t{1},
                               std::multiplies<>());
    }

    // Reinterpret with a new shape of equal element count.
    Tensor reshaped(std::vector<std::size_t> shape) const& {
        return Tensor(std::move(shape), data_);
    }
    Tensor reshaped(std::vector<std::size_t> shape) && {
        return Tensor(std::move(shape), std::move(data_));
    }

    // Append the leading-axis slices of `other`; trailing dims must agree.
    void append_rows(const Tensor& other) {
        if (other.empty()) return;
        if (shape_.empty()) {
            *this = other;
            return;
        }
        if (other.rank() != rank() ||
            !std::equal(shape_.begin() + 1, shape_.end(), other.shape_.begin() + 1)) {
            throw ShapeError("append_rows: trailing dimensions differ");
        }
        data_.insert(data_.end(), other.data_.begin(), other.data_.end());
        shape_[0] += other.shape_[0];
    }

    // Keep only the leading-axis slices listed in `rows` (ascending), in order.
    void retain_rows(std::span<const std::size_t> rows) {
        if (shape_.empty()) return;
        const std::size_t stride = row_stride();
        std::vector<T> kept;
        kept.reserve(rows.size() * stride);
        for (std::size_t r : rows) {
            auto src = row(r);
            kept.insert(kept.end(), src.begin(), src.end());
        }
        data_ = std::move(kept);
        shape_[0] = rows.size();
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        if (shape.empty()) return 0;
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>());
    }

    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

// Widen or narrow every element.
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
    std::vector<To> out(src.size());
    std::transform(src.data().begin(), src.data().end(), out.begin(),
                   [](From v) { return static_cast<To>(v); });
    return Tensor<To>(src.shape(), std::move(out));
}

}  // namespace kvfold
