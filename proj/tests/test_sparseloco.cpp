// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hetloco/sparseloco.hpp"

using namespace hetloco;

namespace {

// Head-only parameter set: final_norm [2] and head [2 x 1].
ModelParams<double> two_tensor_params(double a, double b, double c, double d) {
    ModelParams<double> p;
    p.is_last = true;
    p.final_norm = Tensor<double>({2}, {a, b});
    p.head = Tensor<double>({2, 1}, {c, d});
    return p;
}

}  // namespace

TEST(Schedule, WarmupThenCosineToFloor) {
    const LrSchedule s{1e-3, 10, 110, 0.1};
    EXPECT_EQ(lr_at(0, s), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(5, s), 5e-4);
    EXPECT_DOUBLE_EQ(lr_at(10, s), 1e-3);
    EXPECT_NEAR(lr_at(60, s), 1e-4 + 0.9e-3 * 0.5, 1e-15);
    EXPECT_NEAR(lr_at(110, s), 1e-4, 1e-15);
    EXPECT_NEAR(lr_at(500, s), 1e-4, 1e-15);
    for (std::size_t t = 10; t < 110; ++t) {
        EXPECT_GE(lr_at(t, s), lr_at(t + 1, s));
    }
}

TEST(AdamW, MatchesHandFormula) {
    RngStream rng(1, 0);
    InnerOptState<double> st;
    st.cfg.clip_norm = 0.0;
    Tensor<double> w = gaussian<double>(rng, {3, 2});
    Tensor<double> gain = gaussian<double>(rng, {2});
    std::vector<double> m_w(6, 0.0), v_w(6, 0.0), m_g(2, 0.0), v_g(2, 0.0);
    auto ref_w = w.vec();
    auto ref_g = gain.vec();
    const double lr = 3e-3;
    for (int step = 1; step <= 5; ++step) {
        Tensor<double> gw = gaussian<double>(rng, {3, 2});
        Tensor<double> gg = gaussian<double>(rng, {2});
        auto ref = [&](std::vector<double>& p, std::vector<double>& m, std::vector<double>& v, const Tensor<double>& g,
                       double wd) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                p[i] -= lr * wd * p[i];
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.95 * v[i] + 0.05 * g[i] * g[i];
                const double mh = m[i] / (1 - std::pow(0.9, step));
                const double vh = v[i] / (1 - std::pow(0.95, step));
                p[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
            }
        };
        ref(ref_w, m_w, v_w, gw, 0.1);
        ref(ref_g, m_g, v_g, gg, 0.0);
        adamw_update<double>({&w, &gain}, {&gw, &gg}, st, lr);
        for (std::size_t i = 0; i < 6; ++i) {
            EXPECT_NEAR(w[i], ref_w[i], 1e-12);
        }
        for (std::size_t i = 0; i < 2; ++i) {
            EXPECT_NEAR(gain[i], ref_g[i], 1e-12);
        }
    }
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParamsUnchanged) {
    InnerOptState<double> st;
    st.cfg.weight_decay = 0.0;
    Tensor<double> w({2, 2}, {1, 2, 3, 4});
    Tensor<double> g({2, 2});
    const auto before = w;
    adamw_update<double>({&w}, {&g}, st, 1e-2);
    EXPECT_EQ(w, before);
}

TEST(AdamW, ClipsGlobalNorm) {
    Tensor<double> a({2}, {3.0, 0.0});
    Tensor<double> b({1}, {4.0});
    EXPECT_DOUBLE_EQ(clip_global_norm<double>({&a, &b}, 1.0), 5.0);
    EXPECT_DOUBLE_EQ(a[0], 0.6);
    EXPECT_DOUBLE_EQ(b[0], 0.8);
    Tensor<double> c({1}, {0.5});
    clip_global_norm<double>({&c}, 1.0);
    EXPECT_EQ(c[0], 0.5);
}

TEST(Outer, MeanThenSgdStep) {
    auto global = two_tensor_params(1.0, 1.0, 2.0, 2.0);
    std::vector<Contribution<double>> contribs;
    contribs.emplace_back(std::vector<Tensor<double>>{Tensor<double>({2}, {1.0, 0.0}), Tensor<double>({2, 1}, {0.0, 0.0})});
    contribs.emplace_back(std::vector<Tensor<double>>{Tensor<double>({2}, {0.0, 2.0}), Tensor<double>({2, 1}, {4.0, -2.0})});
    outer_round(global, contribs, 1.0, 2);
    EXPECT_EQ(global.final_norm, Tensor<double>({2}, {0.5, 0.0}));
    EXPECT_EQ(global.head, Tensor<double>({2, 1}, {0.0, 3.0}));
}

TEST(Outer, SingleReplicaWithUnitStepAdoptsReplica) {
    auto global = two_tensor_params(1.0, 2.0, 3.0, 4.0);
    global.is_first = true;
    global.embed = Tensor<double>({1, 2}, {0.25, 0.75});
    ReplicaState<double> r;
    r.stages = {two_tensor_params(0.5, 2.5, 3.0, -1.0)};
    r.stages[0].is_first = true;
    r.stages[0].embed = Tensor<double>({1, 2}, {1.25, -0.5});
    const auto delta = pseudo_gradient(global, r);
    outer_round(global, {Contribution<double>(delta)}, 1.0, 1);
    EXPECT_EQ(global, r.stages[0]);
}

TEST(Outer, MissingContributionIsSyncError) {
    auto global = two_tensor_params(1, 1, 1, 1);
    std::vector<Contribution<double>> one{std::vector<Tensor<double>>{Tensor<double>({2}), Tensor<double>({2, 1})}};
    EXPECT_THROW(outer_round(global, one, 1.0, 2), SyncError);
    std::vector<Contribution<double>> short_c{std::vector<Tensor<double>>{Tensor<double>({2})}};
    EXPECT_THROW(outer_round(global, short_c, 1.0, 1), SyncError);
}

TEST(Outer, SparseAndDenseContributionsAggregateAlike) {
    auto global = two_tensor_params(0, 0, 0, 0);
    const std::vector<Tensor<double>> dense{Tensor<double>({2}, {1.5, -2.0}), Tensor<double>({2, 1}, {0.25, 8.0})};
    std::vector<SparseDelta<double>> sparse;
    for (const auto& t : dense) {
        sparse.push_back(topk_chunks(t, ChunkSpec{2, 2}));
    }
    const auto a = aggregate<double>({Contribution<double>(dense)}, global);
    const auto b = aggregate<double>({Contribution<double>(sparse)}, global);
    EXPECT_EQ(a, b);
}

TEST(Compression, FullDensityZeroBetaSendsEverything) {
    ReplicaState<double> r;
    OuterConfig cfg;
    cfg.beta = 0.0;
    cfg.chunk = ChunkSpec{4, 4};
    RngStream rng(3, 0);
    const std::vector<Tensor<double>> delta{gaussian<double>(rng, {3, 3})};
    const auto sd = compress_pseudograd(r, delta, cfg);
    const auto sent = densify(sd[0]);
    for (std::size_t i = 0; i < 9; ++i) {
        EXPECT_EQ(sent[i], static_cast<double>(static_cast<float>(delta[0][i])));
        EXPECT_EQ(r.errors[0].e[i], delta[0][i] - sent[i]);
    }
}

TEST(Compression, FirstRoundSendsTopKOfDelta) {
    ReplicaState<float> r;
    OuterConfig cfg;
    cfg.chunk = ChunkSpec{8, 2};
    RngStream rng(4, 0);
    const std::vector<Tensor<float>> delta{gaussian<float>(rng, {20})};
    const auto sd = compress_pseudograd(r, delta, cfg);
    EXPECT_EQ(sd[0], topk_chunks(delta[0], cfg.chunk));
    EXPECT_EQ(add(r.errors[0].e, densify(sd[0])), delta[0]);
}

TEST(Compression, ErrorFeedbackStaysBounded) {
    ReplicaState<double> r;
    OuterConfig cfg;
    cfg.chunk = ChunkSpec{64, 4};
    RngStream rng(5, 0);
    double early = 0.0, late = 0.0;
    for (int round = 0; round < 400; ++round) {
        const std::vector<Tensor<double>> delta{gaussian<double>(rng, {256})};
        compress_pseudograd(r, delta, cfg);
        const double n = frobenius(r.errors[0].e);
        (round < 200 ? early : late) = std::max(round < 200 ? early : late, n);
    }
    // ||e|| <= sum_t beta^t ||delta|| ~ 20 * 16
    EXPECT_LT(late, 20.0 * 16.0 * 1.5);
    EXPECT_LT(late, 1.5 * early);
}

TEST(Outer, ConfigValidation) {
    OuterConfig c;
    EXPECT_NO_THROW(c.validate());
    c.beta = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = OuterConfig{};
    c.h = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = OuterConfig{};
    c.eta = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
}
