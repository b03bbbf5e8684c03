// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "hetloco/model.hpp"

using namespace hetloco;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 4;
    c.n_heads = 2;
    c.ffn_mult = 2.0;
    c.vocab = 32;
    c.seq_len = 8;
    c.precision_bits = 64;
    return c;
}

std::vector<std::int32_t> tokens(std::size_t n, std::uint64_t seed, std::size_t vocab) {
    RngStream r(seed, 0);
    std::vector<std::int32_t> t(n);
    for (auto& v : t) {
        v = static_cast<std::int32_t>(r.below(vocab));
    }
    return t;
}

std::vector<double> logits_of(const ModelConfig& cfg, const ModelState<double>& st, const std::vector<std::int32_t>& ids,
                              std::size_t b, std::size_t l) {
    std::vector<StageParams<double>> stages{st.params};
    ActivationPacket<double> pkt;
    pkt.token_ids = ids;
    pkt.batch = b;
    pkt.seq = l;
    return forward_stage(cfg, stages[0], st.buffers, pkt).out.x.vec();
}

}  // namespace

TEST(Model, ParamCountMatchesClosedForm) {
    const auto cfg = tiny();
    RngStream rng(1, 0);
    const auto st = init_model<double>(cfg, rng);
    EXPECT_EQ(st.params.param_count(), expected_param_count(cfg));
    // d=16, f=32: 32*16 + 4*(32 + 1024 + 1536) + 16 + 16*32
    EXPECT_EQ(expected_param_count(cfg), 512u + 4u * 2592u + 16u + 512u);
}

TEST(Model, ConfigValidation) {
    auto cfg = tiny();
    cfg.n_heads = 3;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny();
    cfg.precision_bits = 16;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Model, InitIsDeterministic) {
    const auto cfg = tiny();
    RngStream a(5, 0), b(5, 0);
    EXPECT_EQ(init_model<double>(cfg, a).params, init_model<double>(cfg, b).params);
}

TEST(Model, PartitionRoundTrip) {
    const auto cfg = tiny();
    RngStream rng(2, 0);
    const auto st = init_model<double>(cfg, rng);
    for (std::size_t s : {1u, 2u, 4u}) {
        const auto stages = partition(st.params, s);
        ASSERT_EQ(stages.size(), s);
        EXPECT_TRUE(stages.front().is_first);
        EXPECT_TRUE(stages.back().is_last);
        EXPECT_EQ(reassemble(stages), st.params);
    }
    EXPECT_THROW(partition(st.params, std::size_t{3}), PartitionError);
    EXPECT_THROW(partition(st.params, std::size_t{5}), PartitionError);
}

TEST(Model, CrossEntropyOfUniformLogitsIsLogVocab) {
    const Tensor<double> logits({2, 3, 5});
    const std::vector<std::int32_t> tgt{0, 1, 2, 3, 4, 0};
    const auto r = cross_entropy(logits, tgt);
    EXPECT_NEAR(r.loss, std::log(5.0), 1e-15);
    // gradient rows sum to zero
    for (std::size_t i = 0; i < 6; ++i) {
        double s = 0.0;
        for (double g : r.grad.row(i)) {
            s += g;
        }
        EXPECT_NEAR(s, 0.0, 1e-16);
    }
}

TEST(Model, CrossEntropyRejectsBadTargets) {
    const Tensor<double> logits({1, 2, 4});
    const std::vector<std::int32_t> bad{0, 4};
    EXPECT_THROW(cross_entropy(logits, bad), DimensionError);
    const std::vector<std::int32_t> short_t{0};
    EXPECT_THROW(cross_entropy(logits, short_t), DimensionError);
}

TEST(Model, AttentionIsCausal) {
    const auto cfg = tiny();
    RngStream rng(3, 0);
    const auto st = init_model<double>(cfg, rng);
    auto ids = tokens(8, 9, cfg.vocab);
    const auto a = logits_of(cfg, st, ids, 1, 8);
    ids[5] = (ids[5] + 1) % static_cast<std::int32_t>(cfg.vocab);
    const auto b = logits_of(cfg, st, ids, 1, 8);
    for (std::size_t i = 0; i < 5 * cfg.vocab; ++i) {
        EXPECT_EQ(a[i], b[i]) << "position " << i / cfg.vocab;
    }
    bool changed = false;
    for (std::size_t i = 5 * cfg.vocab; i < a.size(); ++i) {
        changed = changed || a[i] != b[i];
    }
    EXPECT_TRUE(changed);
}

TEST(Model, BatchRowsAreIndependent) {
    const auto cfg = tiny();
    RngStream rng(4, 0);
    const auto st = init_model<double>(cfg, rng);
    const auto ids = tokens(16, 10, cfg.vocab);
    const auto both = logits_of(cfg, st, ids, 2, 8);
    const std::vector<std::int32_t> second(ids.begin() + 8, ids.end());
    const auto one = logits_of(cfg, st, second, 1, 8);
    for (std::size_t i = 0; i < one.size(); ++i) {
        EXPECT_NEAR(both[8 * cfg.vocab + i], one[i], 1e-13);
    }
}

TEST(Model, RejectsOutOfRangeTokens) {
    const auto cfg = tiny();
    RngStream rng(4, 0);
    const auto st = init_model<double>(cfg, rng);
    std::vector<std::int32_t> ids(8, 0);
    ids[3] = 32;
    EXPECT_THROW(logits_of(cfg, st, ids, 1, 8), DimensionError);
    EXPECT_THROW(logits_of(cfg, st, std::vector<std::int32_t>(7, 0), 1, 8), DimensionError);
}

TEST(Model, GradientMatchesFiniteDifferences) {
    const auto cfg = tiny();
    RngStream rng(6, 0);
    auto st = init_model<double>(cfg, rng);
    // larger weights so every path carries signal
    st.params.visit([&](const std::string&, Tensor<double>& t) {
        for (auto& v : t.vec()) {
            v += 0.1 * rng.normal();
        }
    });
    const auto in = tokens(16, 11, cfg.vocab);
    const auto tg = tokens(16, 12, cfg.vocab);
    std::vector<StageParams<double>> stages{st.params};
    const auto res = chain_loss_and_grads(cfg, stages, st.buffers, in, tg, 2, 8);

    std::vector<Tensor<double>*> ps;
    std::vector<const Tensor<double>*> gs;
    stages[0].visit([&](const std::string&, Tensor<double>& t) { ps.push_back(&t); });
    res.grads[0].visit([&](const std::string&, const Tensor<double>& t) { gs.push_back(&t); });
    ASSERT_EQ(ps.size(), gs.size());
    RngStream pick(13, 0);
    const double eps = 1e-5;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        for (int probe = 0; probe < 3; ++probe) {
            const std::size_t j = pick.below(ps[i]->size());
            const double orig = (*ps[i])[j];
            (*ps[i])[j] = orig + eps;
            const double up = chain_loss(cfg, stages, st.buffers, in, tg, 2, 8);
            (*ps[i])[j] = orig - eps;
            const double dn = chain_loss(cfg, stages, st.buffers, in, tg, 2, 8);
            (*ps[i])[j] = orig;
            const double fd = (up - dn) / (2 * eps);
            EXPECT_NEAR((*gs[i])[j], fd, 1e-7 + 1e-5 * std::abs(fd)) << "tensor " << i << " elem " << j;
        }
    }
}

TEST(Model, NonFiniteWeightsRaise) {
    const auto cfg = tiny();
    RngStream rng(7, 0);
    auto st = init_model<double>(cfg, rng);
    st.params.head[0] = std::numeric_limits<double>::infinity();
    std::vector<StageParams<double>> stages{st.params};
    const auto ids = tokens(8, 1, cfg.vocab);
    EXPECT_THROW(chain_loss(cfg, stages, st.buffers, ids, ids, 1, 8), NumericalError);
}
