// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#include <gtest/gtest.h>

#include "hetloco/subspace.hpp"

using namespace hetloco;

namespace {

EmbeddingBuffers<double> random_buffers(std::size_t vocab, std::size_t seq, std::size_t d, std::uint64_t seed) {
    RngStream rng(seed, 0);
    EmbeddingBuffers<double> b;
    b.t_perp = gaussian<double>(rng, {vocab, d});
    b.pos = gaussian<double>(rng, {seq, d});
    return b;
}

}  // namespace

TEST(Subspace, BasisIsOrthonormalAndDeterministic) {
    for (auto [d, k] : {std::pair<std::size_t, std::size_t>{16, 1}, {16, 4}, {64, 8}, {32, 32}}) {
        const auto b = make_basis<double>(42, d, k);
        EXPECT_EQ(b.u.shape(), (Shape{d, k}));
        EXPECT_LT(orthonormality_error(b.u), 1e-12);
        EXPECT_EQ(make_basis<double>(42, d, k).u, b.u);
    }
    EXPECT_NE(make_basis<double>(1, 16, 4).u, make_basis<double>(2, 16, 4).u);
    EXPECT_THROW(make_basis<double>(1, 4, 5), DimensionError);
    EXPECT_THROW(make_basis<double>(1, 4, 0), DimensionError);
}

TEST(Subspace, FullRankBasisProjectsToIdentity) {
    const auto b = make_basis<double>(3, 12, 12);
    EXPECT_LT(max_abs_diff(matmul(b.u, transpose(b.u)), identity<double>(12)), 1e-12);
}

TEST(Subspace, AxisAlignedProjection) {
    // d=2, U=e1: (3, 4) projects to (3, 0)
    const auto b = basis_from_matrix(Tensor<double>({2, 1}, {1.0, 0.0}));
    const Tensor<double> x({1, 2}, {3.0, 4.0});
    EXPECT_EQ(project(x, b), Tensor<double>({1, 2}, {3.0, 0.0}));
    EXPECT_EQ(compress_grad(x, b), Tensor<double>({1, 1}, {3.0}));
    EXPECT_EQ(reconstruct_grad(Tensor<double>({1, 1}, {3.0}), b), Tensor<double>({1, 2}, {3.0, 0.0}));
}

TEST(Subspace, ProjectionIsIdempotent) {
    RngStream rng(5, 0);
    const auto b = make_basis<double>(7, 20, 5);
    const auto x = gaussian<double>(rng, {3, 20});
    const auto p = project(x, b);
    EXPECT_LT(max_abs_diff(project(p, b), p), 1e-13);
    EXPECT_LE(frobenius(p), frobenius(x) + 1e-12);
}

TEST(Subspace, RejectsNonOrthonormalMatrix) {
    EXPECT_THROW(basis_from_matrix(Tensor<double>({2, 1}, {1.0, 1.0})), DegenerateBasisError);
    EXPECT_THROW(basis_from_matrix(Tensor<double>({1, 2}, {1.0, 0.0})), DimensionError);
}

TEST(Subspace, ActivationRoundTripIsExactInsideSubspace) {
    const std::size_t d = 16, k = 4, b = 2, l = 3, vocab = 10;
    const auto basis = make_basis<double>(9, d, k);
    const auto emb = random_buffers(vocab, l, d, 1);
    RngStream rng(2, 0);
    ActivationPacket<double> pkt;
    pkt.batch = b;
    pkt.seq = l;
    pkt.token_ids = {1, 2, 3, 9, 0, 5};
    // x = in-subspace residual + t_perp[ids] + pos
    pkt.x = matmul_last_t(gaussian<double>(rng, {b, l, k}), basis.u);
    detail::apply_fixed_embedding(pkt.x, pkt.token_ids, l, emb, 1.0);

    const auto c = compress_activation(pkt, emb, basis);
    EXPECT_TRUE(c.compressed);
    EXPECT_EQ(c.x.shape(), (Shape{b, l, k}));
    const auto r = reconstruct_activation(c, emb, basis);
    EXPECT_FALSE(r.compressed);
    EXPECT_LT(max_abs_diff(r.x, pkt.x), 1e-12);
}

TEST(Subspace, ReconstructionProjectsResidual) {
    const std::size_t d = 8, k = 3;
    const auto basis = make_basis<double>(4, d, k);
    const auto emb = random_buffers(5, 2, d, 3);
    RngStream rng(6, 0);
    ActivationPacket<double> pkt;
    pkt.batch = 1;
    pkt.seq = 2;
    pkt.token_ids = {4, 1};
    pkt.x = gaussian<double>(rng, {1, 2, d});
    const auto r = reconstruct_activation(compress_activation(pkt, emb, basis), emb, basis);
    auto resid = pkt.x;
    detail::apply_fixed_embedding(resid, pkt.token_ids, 2, emb, -1.0);
    auto expect = project(resid, basis);
    detail::apply_fixed_embedding(expect, pkt.token_ids, 2, emb, 1.0);
    EXPECT_LT(max_abs_diff(r.x, expect), 1e-12);
}

TEST(Subspace, GradientPathIsProjection) {
    RngStream rng(8, 0);
    const auto basis = make_basis<double>(10, 12, 4);
    const auto g = gaussian<double>(rng, {2, 5, 12});
    EXPECT_LT(max_abs_diff(reconstruct_grad(compress_grad(g, basis), basis), project(g, basis)), 1e-13);
}

TEST(Subspace, CompressRejectsMalformedPackets) {
    const auto basis = make_basis<double>(1, 4, 2);
    const auto emb = random_buffers(3, 2, 4, 1);
    ActivationPacket<double> pkt;
    pkt.batch = 1;
    pkt.seq = 2;
    pkt.x = Tensor<double>({1, 2, 4});
    EXPECT_THROW(compress_activation(pkt, emb, basis), DimensionError);  // no ids
    pkt.token_ids = {0, 3};
    EXPECT_THROW(compress_activation(pkt, emb, basis), DimensionError);  // id out of range
    pkt.token_ids = {0, 1};
    pkt.compressed = true;
    EXPECT_THROW(compress_activation(pkt, emb, basis), DimensionError);
}

TEST(Subspace, SplitAndReprojectPreserveTable) {
    RngStream rng(11, 0);
    const auto basis = make_basis<double>(12, 16, 4);
    const auto te = gaussian<double>(rng, {10, 16});
    auto s = split_embedding(te, basis);
    EXPECT_LT(max_abs_diff(s.table(), te), 1e-13);
    EXPECT_LT(max_abs_diff(project(s.t_s, basis), s.t_s), 1e-13);
    EXPECT_LT(frobenius(project(s.t_perp, basis)), 1e-12);

    // a training update leaves the subspace; reprojection moves the excess into t_perp
    const auto drift = gaussian<double>(rng, {10, 16});
    s.t_s = add(s.t_s, drift);
    const auto before = s.table();
    s = reproject_embedding(std::move(s), basis);
    EXPECT_LT(max_abs_diff(s.table(), before), 1e-13);
    EXPECT_LT(max_abs_diff(project(s.t_s, basis), s.t_s), 1e-13);
}

TEST(Subspace, ReprojectHandExample) {
    const auto basis = basis_from_matrix(Tensor<double>({2, 1}, {1.0, 0.0}));
    Tensor<double> ts({1, 2}, {1.0, 2.0});
    Tensor<double> tp({1, 2}, {0.0, 5.0});
    reproject_embedding(ts, tp, basis);
    EXPECT_EQ(ts, Tensor<double>({1, 2}, {1.0, 0.0}));
    EXPECT_EQ(tp, Tensor<double>({1, 2}, {0.0, 7.0}));
}

TEST(Subspace, ProjectWeightsTouchesOnlyResidualWrites) {
    RngStream rng(13, 0);
    const auto basis = make_basis<double>(14, 8, 2);
    StageParams<double> st;
    LayerParams<double> lp;
    lp.attn_norm = gaussian<double>(rng, {8});
    lp.wq = gaussian<double>(rng, {8, 8});
    lp.wk = gaussian<double>(rng, {8, 8});
    lp.wv = gaussian<double>(rng, {8, 8});
    lp.wo = gaussian<double>(rng, {8, 8});
    lp.ffn_norm = gaussian<double>(rng, {8});
    lp.w_gate = gaussian<double>(rng, {8, 16});
    lp.w_up = gaussian<double>(rng, {8, 16});
    lp.w_down = gaussian<double>(rng, {16, 8});
    st.layers.push_back(lp);
    const auto p = project_weights(st, basis);
    EXPECT_EQ(p.layers[0].wq, lp.wq);
    EXPECT_EQ(p.layers[0].w_up, lp.w_up);
    EXPECT_LT(max_abs_diff(project(p.layers[0].wo, basis), p.layers[0].wo), 1e-13);
    EXPECT_LT(max_abs_diff(project(p.layers[0].w_down, basis), p.layers[0].w_down), 1e-13);
    const auto full = make_basis<double>(14, 8, 8);
    EXPECT_LT(max_abs_diff(project_weights(st, full).layers[0].w_down, lp.w_down), 1e-13);
}

TEST(Subspace, PacketWireRoundTrip) {
    RngStream rng(15, 0);
    ActivationPacket<float> pkt;
    pkt.batch = 2;
    pkt.seq = 3;
    pkt.token_ids = {1, 2, 3, 4, 5, 6};
    pkt.x = gaussian<float>(rng, {2, 3, 5});
    pkt.compressed = true;
    const auto bytes = encode_packet(pkt);
    EXPECT_EQ(bytes.size(), packet_wire_bytes(2, 3, 5, true));
    EXPECT_EQ(bytes.size(), 16u + 24u + 120u);
    const auto back = decode_packet<float>(bytes);
    EXPECT_EQ(back.x, pkt.x);
    EXPECT_EQ(back.token_ids, pkt.token_ids);
    EXPECT_TRUE(back.compressed);

    auto bad = bytes;
    bad.pop_back();
    EXPECT_THROW(decode_packet<float>(bad), WireFormatError);
}
