// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "hetloco/hetloco.hpp"

using namespace hetloco;

namespace {

Corpus markov_corpus(std::size_t n, std::uint64_t seed) {
    RngStream rng(seed, 0);
    std::vector<std::int32_t> t(n);
    t[0] = 0;
    for (std::size_t i = 1; i < n; ++i) {
        t[i] = rng.uniform() < 0.8 ? (t[i - 1] * 5 + 3) % 32 : static_cast<std::int32_t>(rng.below(32));
    }
    return split_corpus(std::move(t), 0.1);
}

ClusterConfig small_cluster(const std::string& preset, std::size_t m, double k_over_d) {
    ClusterConfig c;
    c.model.d_model = 16;
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.ffn_mult = 2.0;
    c.model.vocab = 32;
    c.model.seq_len = 8;
    c.outer.h = 3;
    c.outer.chunk = ChunkSpec{64, 8};
    c.rounds = 3;
    c.batch = 2;
    c.eval_batches = 2;
    c.warmup = 2;
    return apply_preset(c, preset, m, 2, k_over_d);
}

std::vector<bool> compressed_flags(const std::vector<ReplicaSpec>& specs) {
    std::vector<bool> out;
    for (const auto& s : specs) {
        out.push_back(s.pp_compressed);
    }
    return out;
}

Batch some_batch(std::size_t b, std::size_t l, std::uint64_t seed) {
    RngStream rng(seed, 0);
    Batch out;
    out.batch = b;
    out.seq = l;
    for (std::size_t i = 0; i < b * l; ++i) {
        out.inputs.push_back(static_cast<std::int32_t>(rng.below(32)));
        out.targets.push_back(static_cast<std::int32_t>(rng.below(32)));
    }
    return out;
}

}  // namespace

TEST(Assignment, HalfCompressedTakesOddIndices) {
    EXPECT_EQ(compressed_flags(assign_replicas(4, 2, 2, 0.125)), (std::vector<bool>{false, true, false, true}));
    EXPECT_EQ(compressed_flags(assign_replicas(8, 4, 2, 0.125)),
              (std::vector<bool>{false, true, false, true, false, true, false, true}));
    EXPECT_EQ(compressed_flags(assign_replicas(4, 1, 2, 0.125)), (std::vector<bool>{false, false, false, true}));
    EXPECT_EQ(compressed_flags(assign_replicas(3, 0, 2, 0.125)), (std::vector<bool>{false, false, false}));
    EXPECT_EQ(compressed_flags(assign_replicas(3, 3, 2, 0.125)), (std::vector<bool>{true, true, true}));
}

TEST(Assignment, PresetsAndAlpha) {
    EXPECT_THROW(small_cluster("het_half", 3, 0.25), ConfigError);
    EXPECT_THROW(small_cluster("nonsense", 4, 0.25), ConfigError);
    EXPECT_EQ(compressed_count(0.5, 4), 2u);
    EXPECT_EQ(compressed_count(1.0, 4), 0u);
    EXPECT_EQ(compressed_count(0.0, 4), 4u);
    EXPECT_THROW(compressed_count(0.3, 4), ConfigError);
    EXPECT_THROW(compressed_count(1.5, 4), ConfigError);
    const auto c = small_cluster("het_half", 4, 0.25);
    EXPECT_DOUBLE_EQ(c.alpha(), 0.5);
    EXPECT_EQ(c.basis_k(), 4u);
    EXPECT_NO_THROW(c.validate());
}

TEST(Assignment, CompressionNeedsTwoStages) {
    ReplicaSpec r;
    r.pp_compressed = true;
    r.stages = 1;
    r.k_over_d = 0.5;
    ModelConfig m;
    EXPECT_THROW(r.validate(m), ConfigError);
    r.stages = 3;
    EXPECT_THROW(r.validate(m), ConfigError);  // 3 does not divide 4 layers
}

TEST(Bias, HandExample) {
    const auto basis = basis_from_matrix(Tensor<double>({2, 1}, {1.0, 0.0}));
    const auto r = bias_decompose(Tensor<double>({1, 2}, {3.0, 4.0}), basis, 0.5);
    EXPECT_EQ(r.delta_proj, Tensor<double>({1, 2}, {3.0, 0.0}));
    EXPECT_EQ(r.bias, Tensor<double>({1, 2}, {0.0, 4.0}));
    EXPECT_EQ(r.delta_het, Tensor<double>({1, 2}, {3.0, 2.0}));
    EXPECT_DOUBLE_EQ(r.norm_bias, 4.0);
}

TEST(Bias, EndpointsAndPythagoras) {
    RngStream rng(3, 0);
    const auto basis = make_basis<double>(4, 16, 4);
    const auto delta = gaussian<double>(rng, {5, 16});
    const auto full = bias_decompose(delta, basis, 1.0);
    EXPECT_EQ(full.delta_het, delta);
    const auto none = bias_decompose(delta, basis, 0.0);
    EXPECT_LT(max_abs_diff(none.delta_het, none.delta_proj), 1e-15);
    EXPECT_NEAR(full.norm_delta * full.norm_delta, full.norm_proj * full.norm_proj + full.norm_bias * full.norm_bias,
                1e-10);
    EXPECT_THROW(bias_decompose(delta, basis, -0.1), ConfigError);
}

TEST(Data, ShardsAreDisjointAndCover) {
    std::vector<std::int32_t> toks(103);
    std::iota(toks.begin(), toks.end(), 0);
    const auto one = shard_data(toks, 1, 5);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0].tokens.size(), toks.size());
    const auto four = shard_data(toks, 4, 5);
    std::size_t next = 0;
    for (const auto& s : four) {
        EXPECT_EQ(s.offset, next);
        EXPECT_EQ(s.tokens.front(), static_cast<std::int32_t>(next));
        next += s.tokens.size();
    }
    EXPECT_EQ(next, toks.size());
    EXPECT_THROW(shard_data(toks, 4, 30), CorpusError);
}

TEST(Data, SamplerTargetsAreShiftedInputs) {
    std::vector<std::int32_t> toks(50);
    std::iota(toks.begin(), toks.end(), 0);
    const auto shards = shard_data(toks, 1, 9);
    BatchSampler s(shards[0], 3, 8, 1, 2);
    const auto b = s.next();
    for (std::size_t i = 0; i < b.inputs.size(); ++i) {
        EXPECT_EQ(b.targets[i], b.inputs[i] + 1);
    }
    BatchSampler s2(shards[0], 3, 8, 1, 2);
    EXPECT_EQ(s2.next().inputs, b.inputs);
}

TEST(Pipeline, UncompressedBoundaryIsLosslessInFloat) {
    auto cfg = small_cluster("baseline", 1, 1.0).model;
    cfg.n_layers = 4;
    RngStream rng(1, 0);
    const auto st = init_model<float>(cfg, rng);
    const auto b = some_batch(2, 8, 5);
    const auto mono = chain_loss_and_grads(cfg, std::vector<StageParams<float>>{st.params}, st.buffers, b.inputs,
                                           b.targets, 2, 8);
    for (std::size_t s : {2u, 4u}) {
        const auto stages = partition(st.params, s);
        Channel ch;
        const auto res = pipeline_loss_and_grads<float>(cfg, stages, st.buffers, nullptr, b, &ch);
        EXPECT_EQ(res.loss, mono.loss);
        EXPECT_EQ(reassemble(res.grads), mono.grads[0]);
        ReplicaSpec spec;
        spec.stages = s;
        EXPECT_EQ(ch.bytes, pp_step_bytes(spec, cfg.d_model, 2, 8));
        EXPECT_EQ(ch.messages, 2 * (s - 1));
    }
}

TEST(Pipeline, FullRankCompressionMatchesUncompressed) {
    const auto cfg = small_cluster("baseline", 1, 1.0).model;
    RngStream rng(2, 0);
    const auto st = init_model<double>(cfg, rng);
    const auto basis = make_basis<double>(7, cfg.d_model, cfg.d_model);
    const auto b = some_batch(2, 8, 6);
    const auto stages = partition(st.params, std::size_t{2});
    const auto plain = pipeline_loss_and_grads<double>(cfg, stages, st.buffers, nullptr, b, nullptr);
    const auto comp = pipeline_loss_and_grads<double>(cfg, stages, st.buffers, &basis, b, nullptr);
    EXPECT_NEAR(comp.loss, plain.loss, 1e-5);
    const auto gp = reassemble(plain.grads);
    const auto gc = reassemble(comp.grads);
    std::vector<const Tensor<double>*> a;
    gp.visit([&](const std::string&, const Tensor<double>& t) { a.push_back(&t); });
    std::size_t i = 0;
    gc.visit([&](const std::string& name, const Tensor<double>& t) {
        EXPECT_LT(max_abs_diff(t, *a[i]), 1e-5 * std::max(1.0, static_cast<double>(max_abs(*a[i])))) << name;
        ++i;
    });
}

TEST(Pipeline, CompressedBytesScaleWithWidth) {
    ReplicaSpec r;
    r.stages = 4;
    r.pp_compressed = true;
    r.k_over_d = 0.125;
    // (S-1) * [(16 + 4bL + 4bLw) + (16 + 4bLw)] with b=4, L=32, w=8
    EXPECT_EQ(pp_step_bytes(r, 64, 4, 32), 3u * ((16u + 512u + 4096u) + (16u + 4096u)));
    r.stages = 1;
    EXPECT_EQ(pp_step_bytes(r, 64, 4, 32), 0u);
}

TEST(Experiment, DeterministicAndThreadInvariant) {
    const auto corpus = markov_corpus(6000, 1);
    auto cfg = small_cluster("het_half", 4, 0.25);
    const auto a = run_experiment<float>(cfg, corpus);
    cfg.threads = 3;
    const auto b = run_experiment<float>(cfg, corpus);
    EXPECT_EQ(a.params, b.params);
    ASSERT_EQ(a.report.rounds.size(), 4u);
    for (std::size_t i = 0; i < a.report.rounds.size(); ++i) {
        EXPECT_EQ(a.report.rounds[i].eval_loss, b.report.rounds[i].eval_loss);
        EXPECT_EQ(a.report.rounds[i].dp_bytes, b.report.rounds[i].dp_bytes);
    }
}

TEST(Experiment, EmbeddingStaysInSubspaceAndTableIsPreserved) {
    const auto corpus = markov_corpus(6000, 2);
    const auto cfg = small_cluster("het_half", 4, 0.25);
    const auto res = run_experiment<double>(cfg, corpus);
    const auto basis = make_basis<double>(cfg.basis_seed, 16, 4);
    EXPECT_LT(max_abs_diff(project(res.params.embed, basis), res.params.embed), 1e-12);
    // t_perp has no component inside the subspace it was split from, up to the moved drift
    EXPECT_GT(frobenius(res.buffers.t_perp), 0.0);
}

TEST(Experiment, ByteAccountingMatchesFormulas) {
    const auto corpus = markov_corpus(6000, 3);
    const auto cfg = small_cluster("het_half", 4, 0.25);
    const auto res = run_experiment<float>(cfg, corpus);
    std::uint64_t per_step = 0;
    for (const auto& r : cfg.replicas) {
        per_step += pp_step_bytes(r, cfg.model.d_model, cfg.batch, cfg.model.seq_len);
    }
    for (std::size_t i = 1; i < res.report.rounds.size(); ++i) {
        EXPECT_EQ(res.report.rounds[i].pp_bytes, per_step * cfg.outer.h);
        EXPECT_GT(res.report.rounds[i].dp_bytes, 0u);
    }
    EXPECT_EQ(res.report.rounds[0].pp_bytes, 0u);
    EXPECT_EQ(res.report.basis_k, 4u);
}

TEST(Experiment, DdpCountsDenseGradientTraffic) {
    const auto corpus = markov_corpus(6000, 4);
    auto cfg = small_cluster("ddp", 2, 0.25);
    const auto res = run_experiment<float>(cfg, corpus);
    const std::uint64_t n = res.report.param_count;
    for (std::size_t i = 1; i < res.report.rounds.size(); ++i) {
        EXPECT_EQ(res.report.rounds[i].dp_bytes, 2u * 4u * n * 2u * cfg.outer.h);
    }
}

TEST(Experiment, LossDecreasesOnLearnableStream) {
    const auto corpus = markov_corpus(20000, 5);
    auto cfg = small_cluster("baseline", 2, 1.0);
    cfg.rounds = 8;
    cfg.outer.h = 10;
    cfg.lr = 1e-2;
    const auto res = run_experiment<float>(cfg, corpus);
    EXPECT_LT(res.report.final_eval_loss, res.report.initial_eval_loss);
}
