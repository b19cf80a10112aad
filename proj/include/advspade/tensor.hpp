#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advspade {

/// Rank-4 NCHW shape. Vectors are stored as (N, D, 1, 1); scalars as (1, 1, 1, 1).
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    [[nodiscard]] std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    [[nodiscard]] int dim(int axis) const {
        switch (axis) {
            case 0: return n;
            case 1: return c;
            case 2: return h;
            default: return w;
        }
    }
    [[nodiscard]] std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + ")";
    }
    friend bool operator==(const Shape&, const Shape&) = default;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {
        check_shape(shape);
    }
    Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        check_shape(shape);
        if (data_.size() != shape_.numel()) {
            throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                             " does not match shape " + shape_.str());
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, v); }

    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] std::size_t numel() const { return data_.size(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
    const T& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

    [[nodiscard]] std::size_t offset(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    /// Same storage, new shape with equal element count.
    [[nodiscard]] Tensor reshaped(Shape s) const {
        if (s.numel() != numel()) {
            throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
        }
        return Tensor(s, data_);
    }

    /// Copy of images [first, first + count) along the batch axis.
    [[nodiscard]] Tensor batch_slice(int first, int count) const {
        if (first < 0 || count < 0 || first + count > shape_.n) {
            throw ShapeError("batch slice out of range for " + shape_.str());
        }
        Shape s = shape_;
        s.n = count;
        const std::size_t per = static_cast<std::size_t>(shape_.c) * shape_.plane();
        return Tensor(s, std::vector<T>(data_.begin() + first * per,
                                        data_.begin() + (first + count) * per));
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor& operator+=(const Tensor& o) {
        require_same(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    [[nodiscard]] bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    [[nodiscard]] T sum() const {
        T s = 0;
        for (T v : data_) s += v;
        return s;
    }

    [[nodiscard]] T max_abs() const {
        T m = 0;
        for (T v : data_) m = std::max(m, static_cast<T>(std::abs(v)));
        return m;
    }

    template <typename U>
    [[nodiscard]] Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    void require_same(const Tensor& o) const {
        if (o.shape_ != shape_) {
            throw ShapeError("shape mismatch " + shape_.str() + " vs " + o.shape_.str());
        }
    }

private:
    static void check_shape(const Shape& s) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
            throw ShapeError("negative dimension in shape " + s.str());
        }
    }

    Shape shape_{0, 0, 0, 0};
    std::vector<T> data_;
};

/// Concatenate tensors of identical (C, H, W) along the batch axis.
template <typename T>
Tensor<T> stack_batch(std::span<const Tensor<T>> parts) {
    if (parts.empty()) throw ShapeError("stack_batch of zero tensors");
    Shape s = parts.front().shape();
    s.n = 0;
    std::vector<T> out;
    for (const auto& p : parts) {
        Shape ps = p.shape();
        if (ps.c != s.c || ps.h != s.h || ps.w != s.w) {
            throw ShapeError("stack_batch shape mismatch " + ps.str());
        }
        s.n += ps.n;
        out.insert(out.end(), p.storage().begin(), p.storage().end());
    }
    return Tensor<T>(s, std::move(out));
}

}  // namespace advspade
