// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gtca::num {

using Shape = std::vector<std::size_t>;

/// Thrown for NaN inputs, non-finite gradients and other numeric failures.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Thrown when operand shapes disagree.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::string shape_to_string(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor. Rank 1 and rank 2 are the only ranks the ops use;
/// a rank-1 tensor of length d behaves as a 1 x d row where a matrix is needed.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_to_string(shape_));
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) { return Tensor({rows, cols}, fill); }

    static Tensor identity(std::size_t n) {
        Tensor out({n, n});
        for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
        return out;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const noexcept {
        if (shape_.empty()) return 1;
        return shape_.size() == 1 ? 1 : shape_[0];
    }
    std::size_t cols() const noexcept {
        if (shape_.empty()) return 1;
        return shape_.back();
    }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }
    bool has_nan() const {
        return std::any_of(data_.begin(), data_.end(), [](T v) { return std::isnan(v); });
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    void require_same_shape(const Tensor& other, const char* what) const {
        if (shape_ != other.shape_) {
            throw ShapeError(std::string(what) + ": shape " + shape_to_string(shape_) + " vs " +
                             shape_to_string(other.shape_));
        }
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

/// Bitwise equality; distinguishes +0/-0 and treats identical NaN payloads as equal.
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b);

/// Bitwise equality of row r in both tensors.
template <typename T>
bool rows_bitwise_equal(const Tensor<T>& a, const Tensor<T>& b, std::size_t r);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same_shape(b, "max_abs_diff");
    T out{0};
    for (std::size_t i = 0; i < a.size(); ++i) out = std::max(out, static_cast<T>(std::abs(a[i] - b[i])));
    return out;
}

extern template bool bitwise_equal<float>(const Tensor<float>&, const Tensor<float>&);
extern template bool bitwise_equal<double>(const Tensor<double>&, const Tensor<double>&);
extern template bool rows_bitwise_equal<float>(const Tensor<float>&, const Tensor<float>&, std::size_t);
extern template bool rows_bitwise_equal<double>(const Tensor<double>&, const Tensor<double>&, std::size_t);

}  // namespace gtca::num
