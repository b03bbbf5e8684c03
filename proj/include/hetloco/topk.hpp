// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hetloco/error.hpp"
#include "hetloco/tensor.hpp"
#include "hetloco/wire.hpp"

namespace hetloco {

/// Chunked Top-k layout: a flattened tensor is cut into runs of `chunk_len` elements and each
/// run keeps its `k_per_chunk` largest-magnitude entries.
struct ChunkSpec {
    std::size_t chunk_len = 4096;  // 64 x 64
    std::size_t k_per_chunk = 32;

    void validate() const {
        if (chunk_len == 0 || chunk_len > 65536) {
            throw ConfigError("chunk_len must be in [1, 65536]", "outer.chunk_len");
        }
        if (k_per_chunk == 0 || k_per_chunk > chunk_len) {
            throw ConfigError("k_per_chunk must be in [1, chunk_len]", "outer.k_per_chunk");
        }
    }

    std::size_t num_chunks(std::size_t total_len) const { return (total_len + chunk_len - 1) / chunk_len; }

    /// Number of values kept for a tensor of `total_len` elements (partial last chunk keeps min(k, len)).
    std::size_t kept(std::size_t total_len) const {
        const std::size_t full = total_len / chunk_len;
        const std::size_t tail = total_len % chunk_len;
        return full * k_per_chunk + std::min(k_per_chunk, tail);
    }

    friend bool operator==(const ChunkSpec&, const ChunkSpec&) = default;
};

/// Sparse encoding of a compressed pseudo-gradient for one parameter tensor.
template <Real T>
struct SparseDelta {
    Shape shape;
    ChunkSpec spec;
    /// Per chunk: strictly increasing local indices and the matching values.
    std::vector<std::vector<std::uint16_t>> indices;
    std::vector<std::vector<T>> values;

    std::size_t total_len() const { return shape_size(shape); }

    std::size_t nnz() const {
        std::size_t n = 0;
        for (const auto& c : indices) {
            n += c.size();
        }
        return n;
    }

    friend bool operator==(const SparseDelta&, const SparseDelta&) = default;
};

/// Error-feedback buffer for one parameter tensor.
template <Real T>
struct ErrorAccumulator {
    Tensor<T> e;
    T beta = static_cast<T>(0.95);
};

/// e <- beta * e + delta
template <Real T>
void ef_accumulate(ErrorAccumulator<T>& acc, const Tensor<T>& delta) {
    require_same_shape(acc.e.shape(), delta.shape(), "ef_accumulate");
    auto e = acc.e.data();
    auto d = delta.data();
    for (std::size_t i = 0; i < e.size(); ++i) {
        e[i] = acc.beta * e[i] + d[i];
    }
}

/// Keeps the k largest |values| per chunk. Ties go to the lower index.
template <Real T>
SparseDelta<T> topk_chunks(const Tensor<T>& e, const ChunkSpec& spec) {
    spec.validate();
    SparseDelta<T> out;
    out.shape = e.shape();
    out.spec = spec;
    const std::size_t n = e.size();
    const std::size_t chunks = spec.num_chunks(n);
    out.indices.resize(chunks);
    out.values.resize(chunks);

    std::vector<std::uint32_t> order;
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t begin = c * spec.chunk_len;
        const std::size_t len = std::min(spec.chunk_len, n - begin);
        const std::size_t keep = std::min(spec.k_per_chunk, len);
        const T* base = e.data().data() + begin;

        auto& idx = out.indices[c];
        if (keep == len) {
            idx.resize(len);
            std::iota(idx.begin(), idx.end(), std::uint16_t{0});
        } else {
            order.resize(len);
            std::iota(order.begin(), order.end(), 0u);
            auto before = [base](std::uint32_t a, std::uint32_t b) {
                const T ma = std::abs(base[a]);
                const T mb = std::abs(base[b]);
                return ma > mb || (ma == mb && a < b);
            };
            std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), before);
            order.resize(keep);
            std::sort(order.begin(), order.end());
            idx.assign(order.begin(), order.end());
        }
        auto& vals = out.values[c];
        vals.resize(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            vals[i] = base[idx[i]];
        }
    }
    return out;
}

/// Rounds kept values to the 32-bit wire precision, so error feedback subtracts exactly what the
/// receiver decodes. A no-op for float.
template <Real T>
SparseDelta<T> quantize(SparseDelta<T> sd) {
    for (auto& chunk : sd.values) {
        for (auto& v : chunk) {
            v = static_cast<T>(static_cast<float>(v));
        }
    }
    return sd;
}

template <Real T>
void check_sparse_delta(const SparseDelta<T>& sd) {
    const std::size_t n = sd.total_len();
    if (sd.indices.size() != sd.spec.num_chunks(n) || sd.values.size() != sd.indices.size()) {
        throw DimensionError("sparse delta chunk count does not match its shape");
    }
    for (std::size_t c = 0; c < sd.indices.size(); ++c) {
        const std::size_t len = std::min(sd.spec.chunk_len, n - c * sd.spec.chunk_len);
        const auto& idx = sd.indices[c];
        if (idx.size() != sd.values[c].size()) {
            throw DimensionError("sparse delta chunk " + std::to_string(c) + " has mismatched index/value counts");
        }
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= len || (i > 0 && idx[i] <= idx[i - 1])) {
                throw DimensionError("sparse delta chunk " + std::to_string(c) + " has an invalid index " +
                                     std::to_string(idx[i]));
            }
        }
    }
}

/// e <- e - densify(sd). Transmitted coordinates are subtracted at their stored values.
template <Real T>
void ef_subtract(ErrorAccumulator<T>& acc, const SparseDelta<T>& sd) {
    require_same_shape(acc.e.shape(), sd.shape, "ef_subtract");
    check_sparse_delta(sd);
    auto e = acc.e.data();
    for (std::size_t c = 0; c < sd.indices.size(); ++c) {
        const std::size_t begin = c * sd.spec.chunk_len;
        for (std::size_t i = 0; i < sd.indices[c].size(); ++i) {
            e[begin + sd.indices[c][i]] -= sd.values[c][i];
        }
    }
}

template <Real T>
Tensor<T> densify(const SparseDelta<T>& sd) {
    check_sparse_delta(sd);
    Tensor<T> out(sd.shape);
    for (std::size_t c = 0; c < sd.indices.size(); ++c) {
        const std::size_t begin = c * sd.spec.chunk_len;
        for (std::size_t i = 0; i < sd.indices[c].size(); ++i) {
            out[begin + sd.indices[c][i]] = sd.values[c][i];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Wire format
//
// u64 total_len | u32 chunk_len | u32 k | per chunk: u32 count, u16 index * count, f32 value * count

inline constexpr std::size_t kSparseHeaderBytes = 16;

/// Encoded size of a delta with the given number of chunks and kept values.
inline std::size_t sparse_wire_bytes(std::size_t chunks, std::size_t nnz) {
    return kSparseHeaderBytes + 4 * chunks + 6 * nnz;
}

template <Real T>
wire::Bytes encode_sparse(const SparseDelta<T>& sd) {
    check_sparse_delta(sd);
    wire::Bytes out;
    out.reserve(sparse_wire_bytes(sd.indices.size(), sd.nnz()));
    wire::Writer w(out);
    w.put<std::uint64_t>(sd.total_len());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(sd.spec.chunk_len));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(sd.spec.k_per_chunk));
    for (std::size_t c = 0; c < sd.indices.size(); ++c) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(sd.indices[c].size()));
        for (auto i : sd.indices[c]) {
            w.put<std::uint16_t>(i);
        }
        for (auto v : sd.values[c]) {
            w.put_f32(static_cast<float>(v));
        }
    }
    return out;
}

/// Decodes a delta for a parameter of the given shape. Values travel as 32-bit floats.
template <Real T>
SparseDelta<T> decode_sparse(std::span<const std::uint8_t> bytes, const Shape& shape) {
    wire::Reader r(bytes);
    SparseDelta<T> sd;
    sd.shape = shape;
    const auto total = r.get<std::uint64_t>();
    if (total != shape_size(shape)) {
        throw WireFormatError("sparse delta length " + std::to_string(total) + " does not match shape " +
                              shape_str(shape));
    }
    sd.spec.chunk_len = r.get<std::uint32_t>();
    sd.spec.k_per_chunk = r.get<std::uint32_t>();
    try {
        sd.spec.validate();
    } catch (const ConfigError& e) {
        throw WireFormatError(std::string("sparse delta header: ") + e.what());
    }
    const std::size_t chunks = sd.spec.num_chunks(total);
    sd.indices.resize(chunks);
    sd.values.resize(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
        const auto count = r.get<std::uint32_t>();
        if (count > sd.spec.k_per_chunk) {
            throw WireFormatError("sparse delta chunk holds more than k values");
        }
        sd.indices[c].resize(count);
        for (auto& i : sd.indices[c]) {
            i = r.get<std::uint16_t>();
        }
        sd.values[c].resize(count);
        for (auto& v : sd.values[c]) {
            v = static_cast<T>(r.get_f32());
        }
    }
    if (r.remaining() != 0) {
        throw WireFormatError("trailing bytes after sparse delta");
    }
    try {
        check_sparse_delta(sd);
    } catch (const DimensionError& e) {
        throw WireFormatError(e.what());
    }
    return sd;
}

}  // namespace hetloco
