// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "hetloco/hetloco.hpp"
#include "hetloco/io.hpp"

using namespace hetloco;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Config, DefaultsExpandToBaseline) {
    const auto rc = io::parse_config_text("{}");
    EXPECT_EQ(rc.preset, "baseline");
    EXPECT_EQ(rc.cluster.replicas.size(), 4u);
    EXPECT_EQ(rc.cluster.num_compressed(), 0u);
    EXPECT_EQ(rc.cluster.outer.h, 50u);
}

TEST(Config, SectionsOverrideDefaults) {
    const auto rc = io::parse_config_text(R"({
        "model": {"d_model": 32, "n_layers": 2, "n_heads": 4, "precision": 64},
        "outer": {"h": 7, "rounds": 3, "chunk_len": 256, "k_per_chunk": 2},
        "inner": {"lr": 0.01, "batch": 2},
        "cluster": {"preset": "het_half", "replicas": 4, "stages": 2, "k_over_d": 0.25},
        "seeds": {"model": 11, "data": 12, "basis": 13}
    })");
    EXPECT_EQ(rc.cluster.model.d_model, 32u);
    EXPECT_EQ(rc.cluster.model.precision_bits, 64);
    EXPECT_EQ(rc.cluster.outer.h, 7u);
    EXPECT_EQ(rc.cluster.rounds, 3u);
    EXPECT_EQ(rc.cluster.outer.chunk.chunk_len, 256u);
    EXPECT_EQ(rc.cluster.batch, 2u);
    EXPECT_EQ(rc.cluster.num_compressed(), 2u);
    EXPECT_EQ(rc.cluster.basis_k(), 8u);
    EXPECT_EQ(rc.cluster.basis_seed, 13u);
}

TEST(Config, UnknownKeyIsNamed) {
    try {
        io::parse_config_text(R"({"outer": {"H": 10}})");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.key(), "outer.H");
    }
    EXPECT_THROW(io::parse_config_text(R"({"extra": 1})"), ConfigError);
}

TEST(Config, BadValuesAreRejected) {
    EXPECT_THROW(io::parse_config_text(R"({"outer": {"h": "ten"}})"), ConfigError);
    EXPECT_THROW(io::parse_config_text(R"({"outer": {"beta": 1.0}})"), ConfigError);
    EXPECT_THROW(io::parse_config_text("{not json"), ConfigError);
    EXPECT_THROW(io::parse_config_text(R"({"cluster": {"preset": "het_half", "replicas": 3}})"), ConfigError);
    EXPECT_THROW(io::load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, ResolvedJsonListsReplicas) {
    const auto rc = io::parse_config_text(R"({"cluster": {"preset": "het_half", "replicas": 4}})");
    const auto j = io::to_json(rc);
    ASSERT_TRUE(j.contains("cluster"));
    const auto text = j.dump();
    EXPECT_NE(text.find("pp_compressed"), std::string::npos);
}

TEST(Output, MetricsCsvIsDataOnly) {
    RunReport rep;
    RoundRecord r0;
    r0.eval_loss = 5.5;
    RoundRecord r1;
    r1.round = 1;
    r1.eval_loss = 0.1;
    r1.pp_bytes = 100;
    r1.dp_bytes = 7;
    rep.rounds = {r0, r1};
    EXPECT_EQ(io::metrics_csv(rep), "round,eval_loss,pp_bytes,dp_bytes\n0,5.5,0,0\n1,0.1,100,7\n");
}

TEST(Output, AtomicWriteReplacesFile) {
    const auto dir = fs::temp_directory_path() / "hetloco_io_test";
    fs::create_directories(dir);
    const auto p = dir / "a.txt";
    io::atomic_write(p, std::string("one"));
    io::atomic_write(p, std::string("two"));
    EXPECT_EQ(read_file(p), "two");
    for (const auto& e : fs::directory_iterator(dir)) {
        EXPECT_EQ(e.path().filename(), "a.txt");
    }
    fs::remove_all(dir);
}

TEST(Output, CheckpointRoundTrip) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.vocab = 20;
    cfg.seq_len = 4;
    RngStream rng(1, 0);
    const auto st = init_model<float>(cfg, rng);
    const auto ck = io::make_checkpoint(st.params, st.buffers, io::json::object());

    RngStream other(2, 0);
    auto restored = init_model<float>(cfg, other);
    ASSERT_NE(restored.params, st.params);
    io::load_checkpoint(ck.blob, ck.manifest, restored.params, restored.buffers);
    EXPECT_EQ(restored.params, st.params);
    EXPECT_EQ(restored.buffers.t_perp, st.buffers.t_perp);
    EXPECT_EQ(restored.buffers.pos, st.buffers.pos);

    auto truncated = ck.blob;
    truncated.resize(truncated.size() / 2);
    EXPECT_THROW(io::load_checkpoint(truncated, ck.manifest, restored.params, restored.buffers), WireFormatError);
}
