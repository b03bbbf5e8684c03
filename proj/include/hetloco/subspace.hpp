// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hetloco/error.hpp"
#include "hetloco/linalg.hpp"
#include "hetloco/model.hpp"
#include "hetloco/rng.hpp"
#include "hetloco/tensor.hpp"
#include "hetloco/wire.hpp"

namespace hetloco {

/// Stream id reserved for basis generation, so basis seeds never collide with model init.
inline constexpr std::uint64_t kBasisStream = 0xba515;

template <Real T>
constexpr double orthonormality_tolerance() {
    return std::same_as<T, float> ? 1e-5 : 1e-10;
}

/// Orthonormal d x k matrix U; its column space is the compression subspace.
template <Real T>
struct ProjectionBasis {
    Tensor<T> u;
    std::uint64_t seed = 0;
    std::size_t d = 0;
    std::size_t k = 0;
};

/// max |U^T U - I|
template <Real T>
double orthonormality_error(const Tensor<T>& u) {
    const auto gram = matmul(transpose(u), u);
    double err = 0.0;
    for (std::size_t i = 0; i < gram.extent(0); ++i) {
        for (std::size_t j = 0; j < gram.extent(1); ++j) {
            err = std::max(err, std::abs(static_cast<double>(gram(i, j)) - (i == j ? 1.0 : 0.0)));
        }
    }
    return err;
}

/// Wraps an explicit matrix, checking orthonormality.
template <Real T>
ProjectionBasis<T> basis_from_matrix(Tensor<T> u, std::uint64_t seed = 0) {
    require_rank2(u.shape(), "basis");
    if (u.extent(1) > u.extent(0)) {
        throw DimensionError("basis must have k <= d, got " + shape_str(u.shape()));
    }
    const double err = orthonormality_error(u);
    if (!(err < orthonormality_tolerance<T>())) {
        throw DegenerateBasisError("basis is not orthonormal (max |U^T U - I| = " + std::to_string(err) + ")");
    }
    ProjectionBasis<T> b;
    b.d = u.extent(0);
    b.k = u.extent(1);
    b.seed = seed;
    b.u = std::move(u);
    return b;
}

/// U = qr_orthonormalize(gaussian(seed, d x k)).
template <Real T>
ProjectionBasis<T> make_basis(std::uint64_t seed, std::size_t d, std::size_t k) {
    if (k == 0 || k > d) {
        throw DimensionError("make_basis: need 1 <= k <= d, got k=" + std::to_string(k) + " d=" + std::to_string(d));
    }
    RngStream rng(seed, kBasisStream);
    const auto a = gaussian<double>(rng, {d, k});
    return basis_from_matrix(qr_orthonormalize(a).template cast<T>(), seed);
}

/// x U U^T along the last axis.
template <Real T>
Tensor<T> project(const Tensor<T>& x, const ProjectionBasis<T>& basis) {
    if (x.cols() != basis.d) {
        throw DimensionError("project: last extent " + std::to_string(x.cols()) + " != d " + std::to_string(basis.d));
    }
    return matmul_last_t(matmul_last(x, basis.u), basis.u);
}

/// Learnable in-subspace and fixed out-of-subspace parts of the token embedding, plus positions.
template <Real T>
struct EmbeddingSplit {
    Tensor<T> t_s;     // [vocab x d]
    Tensor<T> t_perp;  // [vocab x d]
    Tensor<T> pos;     // [L x d]

    /// The logical token-embedding table t_s + t_perp.
    Tensor<T> table() const { return add(t_s, t_perp); }
};

namespace detail {

/// Subtracts (sign = -1) or adds (sign = +1) t_perp[ids] + pos to every row of x in place.
template <Real T>
void apply_fixed_embedding(Tensor<T>& x, const std::vector<std::int32_t>& ids, std::size_t seq,
                           const EmbeddingBuffers<T>& emb, T sign) {
    const std::size_t d = x.cols();
    if (emb.t_perp.cols() != d || emb.pos.cols() != d) {
        throw DimensionError("embedding buffers do not match activation width");
    }
    if (seq > emb.pos.extent(0)) {
        throw DimensionError("sequence longer than positional table");
    }
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const auto id = ids[r];
        if (id < 0 || static_cast<std::size_t>(id) >= emb.t_perp.extent(0)) {
            throw DimensionError("token id " + std::to_string(id) + " out of range");
        }
        const auto tp = emb.t_perp.row(static_cast<std::size_t>(id));
        const auto pe = emb.pos.row(r % seq);
        auto xr = x.row(r);
        for (std::size_t j = 0; j < d; ++j) {
            xr[j] += sign * (tp[j] + pe[j]);
        }
    }
}

}  // namespace detail

/// x_tilde = (x - t_perp[ids] - pos) U
template <Real T>
ActivationPacket<T> compress_activation(const ActivationPacket<T>& pkt, const EmbeddingBuffers<T>& emb,
                                        const ProjectionBasis<T>& basis) {
    if (pkt.compressed) {
        throw DimensionError("compress_activation: packet already compressed");
    }
    if (pkt.token_ids.empty() || pkt.token_ids.size() != pkt.batch * pkt.seq) {
        throw DimensionError("compress_activation: packet is missing token ids");
    }
    if (pkt.x.shape() != Shape{pkt.batch, pkt.seq, basis.d}) {
        throw DimensionError("compress_activation: expected activations " + shape_str({pkt.batch, pkt.seq, basis.d}));
    }
    Tensor<T> residual = pkt.x;
    detail::apply_fixed_embedding(residual, pkt.token_ids, pkt.seq, emb, T{-1});
    ActivationPacket<T> out;
    out.x = matmul_last(residual, basis.u);
    out.token_ids = pkt.token_ids;
    out.batch = pkt.batch;
    out.seq = pkt.seq;
    out.compressed = true;
    return out;
}

/// x_hat = x_tilde U^T + t_perp[ids] + pos
template <Real T>
ActivationPacket<T> reconstruct_activation(const ActivationPacket<T>& pkt, const EmbeddingBuffers<T>& emb,
                                           const ProjectionBasis<T>& basis) {
    if (!pkt.compressed) {
        throw DimensionError("reconstruct_activation: packet is not compressed");
    }
    if (pkt.token_ids.empty() || pkt.token_ids.size() != pkt.batch * pkt.seq) {
        throw DimensionError("reconstruct_activation: packet is missing token ids");
    }
    if (pkt.x.shape() != Shape{pkt.batch, pkt.seq, basis.k}) {
        throw DimensionError("reconstruct_activation: expected coordinates " + shape_str({pkt.batch, pkt.seq, basis.k}));
    }
    ActivationPacket<T> out;
    out.x = matmul_last_t(pkt.x, basis.u);
    detail::apply_fixed_embedding(out.x, pkt.token_ids, pkt.seq, emb, T{1});
    out.token_ids = pkt.token_ids;
    out.batch = pkt.batch;
    out.seq = pkt.seq;
    out.compressed = false;
    return out;
}

/// g_tilde = g U
template <Real T>
Tensor<T> compress_grad(const Tensor<T>& g, const ProjectionBasis<T>& basis) {
    if (g.cols() != basis.d) {
        throw DimensionError("compress_grad: last extent " + std::to_string(g.cols()) + " != d");
    }
    return matmul_last(g, basis.u);
}

/// g_hat = g_tilde U^T, the adjoint of the forward reconstruction.
template <Real T>
Tensor<T> reconstruct_grad(const Tensor<T>& g_tilde, const ProjectionBasis<T>& basis) {
    if (g_tilde.cols() != basis.k) {
        throw DimensionError("reconstruct_grad: last extent " + std::to_string(g_tilde.cols()) + " != k");
    }
    return matmul_last_t(g_tilde, basis.u);
}

/// t_s = te U U^T, t_perp = te - t_s.
template <Real T>
EmbeddingSplit<T> split_embedding(const Tensor<T>& te, const ProjectionBasis<T>& basis, Tensor<T> pos = {}) {
    if (!te.all_finite()) {
        throw NumericalError("split_embedding: non-finite embedding table");
    }
    EmbeddingSplit<T> s;
    s.t_s = project(te, basis);
    s.t_perp = sub(te, s.t_s);
    s.pos = std::move(pos);
    return s;
}

/// Moves the out-of-subspace part of t_s into t_perp:
///   t_perp <- t_perp + (t_s - P(t_s)),  t_s <- P(t_s)
template <Real T>
void reproject_embedding(Tensor<T>& t_s, Tensor<T>& t_perp, const ProjectionBasis<T>& basis) {
    require_same_shape(t_s.shape(), t_perp.shape(), "reproject_embedding");
    const auto projected = project(t_s, basis);
    for (std::size_t i = 0; i < t_s.size(); ++i) {
        t_perp[i] += t_s[i] - projected[i];
    }
    t_s = projected;
}

template <Real T>
EmbeddingSplit<T> reproject_embedding(EmbeddingSplit<T> emb, const ProjectionBasis<T>& basis) {
    reproject_embedding(emb.t_s, emb.t_perp, basis);
    return emb;
}

/// Projects the rows of every residual-stream write (attention output and FFN down projection)
/// onto Col(U).
template <Real T>
StageParams<T> project_weights(StageParams<T> stage, const ProjectionBasis<T>& basis) {
    for (auto& layer : stage.layers) {
        layer.wo = project(layer.wo, basis);
        layer.w_down = project(layer.w_down, basis);
    }
    return stage;
}

// ---------------------------------------------------------------------------
// Packet wire format
//
// u32 batch | u32 seq | u32 width | u32 flags | i32 token id * (b*L) if flags & kHasIds
// | f32 value * (b*L*width)

inline constexpr std::uint32_t kPacketCompressed = 1u;
inline constexpr std::uint32_t kPacketHasIds = 2u;
inline constexpr std::size_t kPacketHeaderBytes = 16;

inline std::size_t packet_wire_bytes(std::size_t batch, std::size_t seq, std::size_t width, bool has_ids) {
    return kPacketHeaderBytes + (has_ids ? 4 * batch * seq : 0) + 4 * batch * seq * width;
}

template <Real T>
wire::Bytes encode_packet(const Tensor<T>& x, std::size_t batch, std::size_t seq, bool compressed,
                          const std::vector<std::int32_t>* token_ids) {
    if (x.rank() != 3 || x.extent(0) != batch || x.extent(1) != seq) {
        throw DimensionError("encode_packet: tensor shape " + shape_str(x.shape()) + " is not [b x L x width]");
    }
    if (token_ids && token_ids->size() != batch * seq) {
        throw DimensionError("encode_packet: token id count mismatch");
    }
    wire::Bytes out;
    out.reserve(packet_wire_bytes(batch, seq, x.cols(), token_ids != nullptr));
    wire::Writer w(out);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(batch));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(seq));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(x.cols()));
    w.put<std::uint32_t>((compressed ? kPacketCompressed : 0u) | (token_ids ? kPacketHasIds : 0u));
    if (token_ids) {
        for (auto id : *token_ids) {
            w.put<std::int32_t>(id);
        }
    }
    for (T v : x.data()) {
        w.put_f32(static_cast<float>(v));
    }
    return out;
}

template <Real T>
wire::Bytes encode_packet(const ActivationPacket<T>& pkt) {
    return encode_packet(pkt.x, pkt.batch, pkt.seq, pkt.compressed, &pkt.token_ids);
}

template <Real T>
ActivationPacket<T> decode_packet(std::span<const std::uint8_t> bytes) {
    wire::Reader r(bytes);
    ActivationPacket<T> pkt;
    pkt.batch = r.get<std::uint32_t>();
    pkt.seq = r.get<std::uint32_t>();
    const std::size_t width = r.get<std::uint32_t>();
    const auto flags = r.get<std::uint32_t>();
    if (pkt.batch == 0 || pkt.seq == 0 || width == 0 || (flags & ~(kPacketCompressed | kPacketHasIds)) != 0) {
        throw WireFormatError("invalid packet header");
    }
    pkt.compressed = (flags & kPacketCompressed) != 0;
    const std::size_t rows = pkt.batch * pkt.seq;
    if (r.remaining() != packet_wire_bytes(pkt.batch, pkt.seq, width, (flags & kPacketHasIds) != 0) - kPacketHeaderBytes) {
        throw WireFormatError("packet payload size does not match its header");
    }
    if (flags & kPacketHasIds) {
        pkt.token_ids.resize(rows);
        for (auto& id : pkt.token_ids) {
            id = r.get<std::int32_t>();
        }
    }
    std::vector<T> values(rows * width);
    for (auto& v : values) {
        v = static_cast<T>(r.get_f32());
    }
    pkt.x = Tensor<T>::from_external({pkt.batch, pkt.seq, width}, std::move(values));
    return pkt;
}

}  // namespace hetloco
