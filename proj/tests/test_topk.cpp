// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "hetloco/linalg.hpp"
#include "hetloco/topk.hpp"

using namespace hetloco;

TEST(TopK, KeepsLargestMagnitudesPerChunk) {
    const Tensor<double> e({8}, {0.1, -3.0, 2.0, 0.5, -0.2, 0.3, 4.0, -4.0});
    const auto sd = topk_chunks(e, ChunkSpec{4, 2});
    ASSERT_EQ(sd.indices.size(), 2u);
    EXPECT_EQ(sd.indices[0], (std::vector<std::uint16_t>{1, 2}));
    EXPECT_EQ(sd.values[0], (std::vector<double>{-3.0, 2.0}));
    EXPECT_EQ(sd.indices[1], (std::vector<std::uint16_t>{2, 3}));
    EXPECT_EQ(sd.values[1], (std::vector<double>{4.0, -4.0}));
}

TEST(TopK, TiesGoToLowerIndex) {
    const Tensor<double> e({6}, {1.0, -1.0, 1.0, 0.5, -1.0, 1.0});
    const auto sd = topk_chunks(e, ChunkSpec{6, 3});
    EXPECT_EQ(sd.indices[0], (std::vector<std::uint16_t>{0, 1, 2}));
}

TEST(TopK, PartialLastChunk) {
    const Tensor<double> e({5}, {1, 2, 3, 4, 5});
    const ChunkSpec spec{4, 2};
    const auto sd = topk_chunks(e, spec);
    ASSERT_EQ(sd.indices.size(), 2u);
    EXPECT_EQ(sd.indices[1], (std::vector<std::uint16_t>{0}));
    EXPECT_EQ(sd.nnz(), spec.kept(5));
    EXPECT_EQ(spec.kept(5), 3u);
}

TEST(TopK, MatchesSortOracle) {
    RngStream rng(21, 0);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t len = 1 + rng.below(300);
        const std::size_t k = 1 + rng.below(len);
        auto e = gaussian<double>(rng, {len});
        // coarse quantization creates many ties
        for (auto& v : e.vec()) {
            v = std::round(v * 2.0) / 2.0;
        }
        const auto sd = topk_chunks(e, ChunkSpec{len, k});
        std::vector<std::uint16_t> order(len);
        for (std::size_t i = 0; i < len; ++i) {
            order[i] = static_cast<std::uint16_t>(i);
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](auto a, auto b) { return std::abs(e[a]) > std::abs(e[b]); });
        order.resize(k);
        std::sort(order.begin(), order.end());
        EXPECT_EQ(sd.indices[0], order);
    }
}

TEST(TopK, FullDensityKeepsEverything) {
    RngStream rng(22, 0);
    const auto e = gaussian<double>(rng, {3, 7});
    const auto sd = topk_chunks(e, ChunkSpec{8, 8});
    EXPECT_EQ(densify(sd), e);
}

TEST(TopK, ErrorFeedbackConservesMass) {
    RngStream rng(23, 0);
    ErrorAccumulator<double> acc{gaussian<double>(rng, {64}), 0.9};
    const auto delta = gaussian<double>(rng, {64});
    const auto prev = acc.e;
    ef_accumulate(acc, delta);
    for (std::size_t i = 0; i < 64; ++i) {
        EXPECT_EQ(acc.e[i], 0.9 * prev[i] + delta[i]);
    }
    const auto before = acc.e;
    const auto sd = quantize(topk_chunks(acc.e, ChunkSpec{16, 4}));
    ef_subtract(acc, sd);
    const auto sent = densify(sd);
    for (std::size_t i = 0; i < 64; ++i) {
        EXPECT_EQ(acc.e[i] + sent[i], before[i]);
    }
}

TEST(TopK, QuantizeRoundsToWirePrecision) {
    const Tensor<double> e({2}, {0.1, 1.0 / 3.0});
    const auto q = quantize(topk_chunks(e, ChunkSpec{2, 2}));
    EXPECT_EQ(q.values[0][0], static_cast<double>(0.1f));
    EXPECT_EQ(q.values[0][1], static_cast<double>(1.0f / 3.0f));
}

TEST(TopK, WireRoundTrip) {
    RngStream rng(24, 0);
    const auto e = gaussian<float>(rng, {10, 13});
    const auto sd = topk_chunks(e, ChunkSpec{32, 5});
    const auto bytes = encode_sparse(sd);
    EXPECT_EQ(bytes.size(), sparse_wire_bytes(5, 5 * 4 + 2));
    EXPECT_EQ(decode_sparse<float>(bytes, e.shape()), sd);
}

TEST(TopK, WireSizeFormula) {
    EXPECT_EQ(sparse_wire_bytes(0, 0), 16u);
    EXPECT_EQ(sparse_wire_bytes(3, 10), 16u + 12u + 60u);
}

TEST(TopK, DecodeRejectsMalformedInput) {
    const Tensor<float> e({8}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto bytes = encode_sparse(topk_chunks(e, ChunkSpec{4, 2}));
    EXPECT_THROW(decode_sparse<float>(bytes, Shape{9}), WireFormatError);
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(decode_sparse<float>(truncated, e.shape()), WireFormatError);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(decode_sparse<float>(trailing, e.shape()), WireFormatError);
}

TEST(TopK, SpecValidation) {
    EXPECT_THROW((ChunkSpec{0, 1}).validate(), ConfigError);
    EXPECT_THROW((ChunkSpec{4, 5}).validate(), ConfigError);
    EXPECT_THROW((ChunkSpec{70000, 5}).validate(), ConfigError);
    EXPECT_NO_THROW((ChunkSpec{4096, 32}).validate());
}
