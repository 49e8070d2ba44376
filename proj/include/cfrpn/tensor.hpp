#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cfrpn {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Extents of a rank-4 tensor in [batch, channels, height, width] order.
struct Shape {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    constexpr std::size_t numel() const noexcept { return n * c * h * w; }
    constexpr std::size_t per_sample() const noexcept { return c * h * w; }
    constexpr std::size_t spatial() const noexcept { return h * w; }
    constexpr std::array<std::size_t, 4> extents() const noexcept { return {n, c, h, w}; }

    friend constexpr bool operator==(const Shape&, const Shape&) = default;

    std::string str() const;
};

/// Dense row-major rank-4 array. Element (n,c,h,w) lives at ((n*C + c)*H + h)*W + w.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{}) : shape_(shape), data_(shape.numel(), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.numel()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_.str());
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(shape); }
    static Tensor full(Shape shape, T value) { return Tensor(shape, value); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }

    std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
        return data_[offset(n, c, h, w)];
    }
    const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return data_[offset(n, c, h, w)];
    }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> sample(std::size_t n) noexcept {
        return std::span<T>(data_).subspan(n * shape_.per_sample(), shape_.per_sample());
    }
    std::span<const T> sample(std::size_t n) const noexcept {
        return std::span<const T>(data_).subspan(n * shape_.per_sample(), shape_.per_sample());
    }

    /// Same data viewed under a different shape with equal element count.
    Tensor reshaped(Shape shape) const& {
        if (shape.numel() != shape_.numel()) {
            throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
        }
        return Tensor(shape, data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const noexcept {
        for (const T& v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void check_finite(std::string_view what) const {
        if (!all_finite()) throw NumericError("non-finite value in " + std::string(what));
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_{};
    std::vector<T> data_;
};

inline std::string Shape::str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
}

}  // namespace cfrpn
