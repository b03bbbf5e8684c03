// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hetloco/error.hpp"
#include "hetloco/wire.hpp"

namespace hetloco {

/// Scalar types a Tensor may hold.
template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array with an explicit shape.
template <Real T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    /// Zero-filled tensor.
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), T{0}) {
        check_extents();
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (shape_size(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        }
    }

    /// Construction from untrusted input: additionally rejects NaN and Inf.
    static Tensor from_external(Shape shape, std::vector<T> data) {
        Tensor t(std::move(shape), std::move(data));
        if (!t.all_finite()) {
            throw NumericalError("non-finite value in external tensor input");
        }
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

    /// Extent of the last axis.
    std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
    /// Product of all leading extents, i.e. the row count of the [rows x cols] view.
    std::size_t rows() const { return shape_.empty() ? 1 : data_.size() / std::max<std::size_t>(cols(), 1); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& vec() noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
    std::span<const T> row(std::size_t r) const { return std::span<const T>(data_).subspan(r * cols(), cols()); }

    /// Same data under a new shape of equal size.
    Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
    Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <Real U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    void check_extents() const {
        if (std::any_of(shape_.begin(), shape_.end(), [](std::size_t e) { return e == 0; })) {
            throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

template <Real T>
Tensor<T> zeros_like(const Tensor<T>& t) {
    return Tensor<T>(t.shape());
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) {
        throw DimensionError(std::string(what) + ": shape " + shape_str(a) + " vs " + shape_str(b));
    }
}

// ---------------------------------------------------------------------------
// Binary serialization
//
// u64 rank | u64 extent * rank | u32 precision tag (32 or 64) | values (LE)

inline constexpr std::uint32_t kPrecisionTagF32 = 32;
inline constexpr std::uint32_t kPrecisionTagF64 = 64;

template <Real T>
constexpr std::uint32_t precision_tag() {
    return std::same_as<T, float> ? kPrecisionTagF32 : kPrecisionTagF64;
}

template <Real T>
void write_tensor(wire::Bytes& out, const Tensor<T>& t) {
    wire::Writer w(out);
    w.put<std::uint64_t>(t.rank());
    for (auto e : t.shape()) {
        w.put<std::uint64_t>(e);
    }
    w.put<std::uint32_t>(precision_tag<T>());
    for (T v : t.data()) {
        if constexpr (std::same_as<T, float>) {
            w.put_f32(v);
        } else {
            w.put_f64(v);
        }
    }
}

template <Real T>
wire::Bytes serialize(const Tensor<T>& t) {
    wire::Bytes out;
    write_tensor(out, t);
    return out;
}

/// Reads one tensor; values stored at the other precision are converted.
template <Real T>
Tensor<T> read_tensor(wire::Reader& r) {
    const auto rank = r.get<std::uint64_t>();
    if (rank > 16) {
        throw WireFormatError("implausible tensor rank " + std::to_string(rank));
    }
    Shape shape(rank);
    for (auto& e : shape) {
        e = r.get<std::uint64_t>();
        if (e == 0) {
            throw WireFormatError("zero extent in serialized tensor");
        }
    }
    const auto tag = r.get<std::uint32_t>();
    if (tag != kPrecisionTagF32 && tag != kPrecisionTagF64) {
        throw WireFormatError("unknown precision tag " + std::to_string(tag));
    }
    const std::size_t n = shape_size(shape);
    if (r.remaining() < n * (tag / 8)) {
        throw WireFormatError("serialized tensor truncated");
    }
    std::vector<T> data(n);
    for (auto& v : data) {
        v = static_cast<T>(tag == kPrecisionTagF32 ? static_cast<double>(r.get_f32()) : r.get_f64());
    }
    return Tensor<T>::from_external(std::move(shape), std::move(data));
}

template <Real T>
Tensor<T> deserialize(std::span<const std::uint8_t> bytes) {
    wire::Reader r(bytes);
    auto t = read_tensor<T>(r);
    if (r.remaining() != 0) {
        throw WireFormatError("trailing bytes after tensor");
    }
    return t;
}

}  // namespace hetloco
