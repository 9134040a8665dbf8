// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "macl/error.hpp"

namespace macl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor with value semantics. Image batches use NCHW.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const {
        if (i >= shape_.size()) throw ShapeError("dim index out of range for " + shape_str(shape_));
        return shape_[i];
    }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    std::vector<T>& vec() noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // 2D / 4D element access (row-major).
    T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
        return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    void require_same_shape(const Tensor& o, const char* ctx) const {
        if (shape_ != o.shape_)
            throw ShapeError(std::string(ctx) + ": " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

// Copies sample n (all channels) out of an NCHW batch.
template <typename T>
Tensor<T> take_sample(const Tensor<T>& batch, std::size_t n) {
    Shape s = batch.shape();
    const std::size_t per = batch.numel() / s[0];
    s[0] = 1;
    std::vector<T> d(batch.data() + n * per, batch.data() + (n + 1) * per);
    return Tensor<T>(s, std::move(d));
}

// Concatenates tensors with equal trailing dims along axis 0.
template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> items) {
    if (items.empty()) throw ShapeError("concat of zero tensors");
    Shape out = items[0].shape();
    out[0] = 0;
    std::vector<T> d;
    for (const auto& t : items) {
        if (t.rank() != out.size() || !std::equal(out.begin() + 1, out.end(), t.shape().begin() + 1))
            throw ShapeError("concat_batch: " + shape_str(t.shape()) + " vs " + shape_str(items[0].shape()));
        out[0] += t.dim(0);
        d.insert(d.end(), t.vec().begin(), t.vec().end());
    }
    return Tensor<T>(out, std::move(d));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same_shape(b, "max_abs_diff");
    T m{0};
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max<T>(m, a[i] > b[i] ? a[i] - b[i] : b[i] - a[i]);
    return m;
}

} // namespace macl
