// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "hetloco/error.hpp"

namespace hetloco::wire {

using Bytes = std::vector<std::uint8_t>;

/// Appends little-endian scalars to a byte buffer, independent of host byte order.
class Writer {
public:
    explicit Writer(Bytes& out) : out_(out) {}

    template <typename U>
        requires std::is_integral_v<U>
    void put(U value) {
        using Unsigned = std::make_unsigned_t<U>;
        auto bits = static_cast<Unsigned>(value);
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            out_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
        }
    }

    void put_f32(float value) { put(std::bit_cast<std::uint32_t>(value)); }
    void put_f64(double value) { put(std::bit_cast<std::uint64_t>(value)); }

private:
    Bytes& out_;
};

/// Cursor over a little-endian byte buffer. Reading past the end throws WireFormatError.
class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    template <typename U>
        requires std::is_integral_v<U>
    U get() {
        require(sizeof(U));
        std::make_unsigned_t<U> bits = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            bits |= static_cast<std::make_unsigned_t<U>>(in_[pos_ + i]) << (8 * i);
        }
        pos_ += sizeof(U);
        return static_cast<U>(bits);
    }

    float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
    double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

    std::size_t remaining() const noexcept { return in_.size() - pos_; }
    std::size_t position() const noexcept { return pos_; }

private:
    void require(std::size_t n) const {
        if (in_.size() - pos_ < n) {
            throw WireFormatError("truncated buffer: need " + std::to_string(n) + " bytes at offset " +
                                  std::to_string(pos_) + ", have " + std::to_string(in_.size() - pos_));
        }
    }

    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace hetloco::wire
