// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

// Run configuration files, reports and checkpoints. Needs nlohmann/json.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hetloco/error.hpp"
#include "hetloco/hetero.hpp"
#include "hetloco/perfmodel.hpp"

#ifndef HETLOCO_VERSION
#define HETLOCO_VERSION "0.1.0"
#endif

namespace hetloco::io {

using json = nlohmann::ordered_json;

inline const char* version() { return HETLOCO_VERSION; }

struct PerfConfig {
    perf::PerfScenario scenario;
    perf::HardwareSpec hardware;
    double latency_s = 0.0;
    std::vector<double> ratios{1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125};
    std::vector<double> bandwidths_bps{1e8, 2e8, 5e8, 1e9, 2e9, 5e9, 1e10, 1e11};
    double total_steps = 19074;  // ~10B tokens at 524,288 tokens per step
    // Wall-clock comparison: a compressed run on more tokens against an uncompressed one.
    double compare_params = 512e6;
    std::size_t compare_d_model = 1536;
    double compare_bandwidth_bps = 1e9;
    double compressed_tokens = 12e9;
    double uncompressed_tokens = 10e9;
};

struct RunConfig {
    ClusterConfig cluster;
    PerfConfig perf;
    std::string corpus = "data/corpus.txt";
    double eval_fraction = 0.05;
    std::string out_dir = "out";
    // Cluster shape before preset expansion.
    std::string preset = "baseline";
    std::size_t replicas = 4;
    std::size_t stages = 2;
    double k_over_d = 0.125;
    double alpha = 0.5;

    /// Rebuilds cluster.replicas from the preset fields.
    void expand() { cluster = apply_preset(cluster, preset, replicas, stages, k_over_d, alpha); }
};

namespace detail {

inline void check_keys(const json& section, const std::string& name, std::initializer_list<const char*> allowed) {
    if (!section.is_object()) {
        throw ConfigError("section '" + name + "' must be an object", name);
    }
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : section.items()) {
        if (!ok.count(k)) {
            throw ConfigError("unknown key '" + name + "." + k + "'", name + "." + k);
        }
    }
}

template <typename V>
void get(const json& section, const std::string& sect, const char* key, V& out) {
    if (!section.contains(key)) {
        return;
    }
    try {
        out = section.at(key).get<V>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + sect + "." + key + "': " + e.what(), sect + "." + key);
    }
}

}  // namespace detail

/// Parses a JSON config. Unknown keys and malformed values raise ConfigError naming the key.
inline RunConfig parse_config(const json& j) {
    using detail::check_keys;
    using detail::get;
    RunConfig rc;
    auto& c = rc.cluster;
    check_keys(j, "config", {"model", "outer", "inner", "cluster", "perf", "seeds", "data", "output"});

    if (j.contains("model")) {
        const auto& s = j["model"];
        check_keys(s, "model", {"d_model", "n_layers", "n_heads", "ffn_mult", "vocab", "seq_len", "precision"});
        get(s, "model", "d_model", c.model.d_model);
        get(s, "model", "n_layers", c.model.n_layers);
        get(s, "model", "n_heads", c.model.n_heads);
        get(s, "model", "ffn_mult", c.model.ffn_mult);
        get(s, "model", "vocab", c.model.vocab);
        get(s, "model", "seq_len", c.model.seq_len);
        get(s, "model", "precision", c.model.precision_bits);
    }
    if (j.contains("outer")) {
        const auto& s = j["outer"];
        check_keys(s, "outer", {"h", "eta", "beta", "chunk_len", "k_per_chunk", "dp_topk", "rounds"});
        get(s, "outer", "h", c.outer.h);
        get(s, "outer", "eta", c.outer.eta);
        get(s, "outer", "beta", c.outer.beta);
        get(s, "outer", "chunk_len", c.outer.chunk.chunk_len);
        get(s, "outer", "k_per_chunk", c.outer.chunk.k_per_chunk);
        get(s, "outer", "dp_topk", c.outer.dp_topk);
        get(s, "outer", "rounds", c.rounds);
    }
    if (j.contains("inner")) {
        const auto& s = j["inner"];
        check_keys(s, "inner", {"lr", "warmup", "final_lr_frac", "beta1", "beta2", "eps", "weight_decay", "clip_norm",
                                "batch"});
        get(s, "inner", "lr", c.lr);
        get(s, "inner", "warmup", c.warmup);
        get(s, "inner", "final_lr_frac", c.final_lr_frac);
        get(s, "inner", "beta1", c.adamw.beta1);
        get(s, "inner", "beta2", c.adamw.beta2);
        get(s, "inner", "eps", c.adamw.eps);
        get(s, "inner", "weight_decay", c.adamw.weight_decay);
        get(s, "inner", "clip_norm", c.adamw.clip_norm);
        get(s, "inner", "batch", c.batch);
    }
    if (j.contains("cluster")) {
        const auto& s = j["cluster"];
        check_keys(s, "cluster",
                   {"preset", "replicas", "stages", "k_over_d", "alpha", "embed_adapt", "project_weights", "threads"});
        get(s, "cluster", "preset", rc.preset);
        get(s, "cluster", "replicas", rc.replicas);
        get(s, "cluster", "stages", rc.stages);
        get(s, "cluster", "k_over_d", rc.k_over_d);
        get(s, "cluster", "alpha", rc.alpha);
        get(s, "cluster", "embed_adapt", c.embed_adapt);
        get(s, "cluster", "project_weights", c.project_weights);
        get(s, "cluster", "threads", c.threads);
    }
    if (j.contains("perf")) {
        const auto& s = j["perf"];
        auto& p = rc.perf;
        check_keys(s, "perf",
                   {"params", "d_model", "seq_len", "micro_batch", "microbatches", "stages", "h", "dp_density",
                    "act_bytes_per_elem", "dp_bytes_per_value", "dp_volume_factor", "header_bytes",
                    "id_bytes_per_token", "overlap", "peak_flops", "mfu", "latency_s", "ratios", "bandwidths_bps",
                    "total_steps", "compare_params", "compare_d_model", "compare_bandwidth_bps", "compressed_tokens",
                    "uncompressed_tokens"});
        get(s, "perf", "params", p.scenario.params);
        get(s, "perf", "d_model", p.scenario.d_model);
        get(s, "perf", "seq_len", p.scenario.seq_len);
        get(s, "perf", "micro_batch", p.scenario.micro_batch);
        get(s, "perf", "microbatches", p.scenario.microbatches);
        get(s, "perf", "stages", p.scenario.stages);
        get(s, "perf", "h", p.scenario.h);
        get(s, "perf", "dp_density", p.scenario.dp_density);
        get(s, "perf", "act_bytes_per_elem", p.scenario.act_bytes_per_elem);
        get(s, "perf", "dp_bytes_per_value", p.scenario.dp_bytes_per_value);
        get(s, "perf", "dp_volume_factor", p.scenario.dp_volume_factor);
        get(s, "perf", "header_bytes", p.scenario.header_bytes);
        get(s, "perf", "id_bytes_per_token", p.scenario.id_bytes_per_token);
        get(s, "perf", "overlap", p.scenario.overlap);
        get(s, "perf", "peak_flops", p.hardware.peak_flops);
        get(s, "perf", "mfu", p.hardware.mfu);
        get(s, "perf", "latency_s", p.latency_s);
        get(s, "perf", "ratios", p.ratios);
        get(s, "perf", "bandwidths_bps", p.bandwidths_bps);
        get(s, "perf", "total_steps", p.total_steps);
        get(s, "perf", "compare_params", p.compare_params);
        get(s, "perf", "compare_d_model", p.compare_d_model);
        get(s, "perf", "compare_bandwidth_bps", p.compare_bandwidth_bps);
        get(s, "perf", "compressed_tokens", p.compressed_tokens);
        get(s, "perf", "uncompressed_tokens", p.uncompressed_tokens);
    }
    if (j.contains("seeds")) {
        const auto& s = j["seeds"];
        check_keys(s, "seeds", {"model", "data", "basis"});
        get(s, "seeds", "model", c.model_seed);
        get(s, "seeds", "data", c.data_seed);
        get(s, "seeds", "basis", c.basis_seed);
    }
    if (j.contains("data")) {
        const auto& s = j["data"];
        check_keys(s, "data", {"corpus", "eval_fraction", "eval_batches"});
        get(s, "data", "corpus", rc.corpus);
        get(s, "data", "eval_fraction", rc.eval_fraction);
        get(s, "data", "eval_batches", c.eval_batches);
    }
    if (j.contains("output")) {
        const auto& s = j["output"];
        check_keys(s, "output", {"dir"});
        get(s, "output", "dir", rc.out_dir);
    }
    rc.expand();
    rc.cluster.validate();
    return rc;
}

inline RunConfig parse_config_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(j);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

inline json to_json(const perf::PerfScenario& s) {
    return {{"params", s.params},
            {"d_model", s.d_model},
            {"seq_len", s.seq_len},
            {"micro_batch", s.micro_batch},
            {"microbatches", s.microbatches},
            {"stages", s.stages},
            {"k_over_d", s.k_over_d},
            {"h", s.h},
            {"dp_density", s.dp_density},
            {"act_bytes_per_elem", s.act_bytes_per_elem},
            {"dp_bytes_per_value", s.dp_bytes_per_value},
            {"dp_volume_factor", s.dp_volume_factor},
            {"header_bytes", s.header_bytes},
            {"id_bytes_per_token", s.id_bytes_per_token},
            {"overlap", s.overlap}};
}

/// Fully resolved configuration, including the expanded replica list.
inline json to_json(const RunConfig& rc) {
    const auto& c = rc.cluster;
    json replicas = json::array();
    for (const auto& r : c.replicas) {
        replicas.push_back({{"id", r.id},
                            {"pp_compressed", r.pp_compressed},
                            {"stages", r.stages},
                            {"k_over_d", r.k_over_d},
                            {"shard", r.shard}});
    }
    return {
        {"model",
         {{"d_model", c.model.d_model},
          {"n_layers", c.model.n_layers},
          {"n_heads", c.model.n_heads},
          {"ffn_mult", c.model.ffn_mult},
          {"vocab", c.model.vocab},
          {"seq_len", c.model.seq_len},
          {"precision", c.model.precision_bits}}},
        {"outer",
         {{"h", c.outer.h},
          {"eta", c.outer.eta},
          {"beta", c.outer.beta},
          {"chunk_len", c.outer.chunk.chunk_len},
          {"k_per_chunk", c.outer.chunk.k_per_chunk},
          {"dp_topk", c.outer.dp_topk},
          {"rounds", c.rounds}}},
        {"inner",
         {{"lr", c.lr},
          {"warmup", c.warmup},
          {"final_lr_frac", c.final_lr_frac},
          {"beta1", c.adamw.beta1},
          {"beta2", c.adamw.beta2},
          {"eps", c.adamw.eps},
          {"weight_decay", c.adamw.weight_decay},
          {"clip_norm", c.adamw.clip_norm},
          {"batch", c.batch}}},
        {"cluster",
         {{"preset", rc.preset},
          {"replicas", rc.replicas},
          {"stages", rc.stages},
          {"k_over_d", rc.k_over_d},
          {"alpha", rc.alpha},
          {"embed_adapt", c.embed_adapt},
          {"project_weights", c.project_weights},
          {"threads", c.threads},
          {"mode", to_string(c.mode)},
          {"resolved_alpha", c.alpha()},
          {"replica_specs", replicas}}},
        {"perf",
         {{"scenario", to_json(rc.perf.scenario)},
          {"peak_flops", rc.perf.hardware.peak_flops},
          {"mfu", rc.perf.hardware.mfu},
          {"latency_s", rc.perf.latency_s},
          {"ratios", rc.perf.ratios},
          {"bandwidths_bps", rc.perf.bandwidths_bps},
          {"total_steps", rc.perf.total_steps},
          {"compare_params", rc.perf.compare_params},
          {"compare_d_model", rc.perf.compare_d_model},
          {"compare_bandwidth_bps", rc.perf.compare_bandwidth_bps},
          {"compressed_tokens", rc.perf.compressed_tokens},
          {"uncompressed_tokens", rc.perf.uncompressed_tokens}}},
        {"seeds", {{"model", c.model_seed}, {"data", c.data_seed}, {"basis", c.basis_seed}}},
        {"data", {{"corpus", rc.corpus}, {"eval_fraction", rc.eval_fraction}, {"eval_batches", c.eval_batches}}},
        {"output", {{"dir", rc.out_dir}}},
    };
}

inline json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const RoundRecord& r) {
    return {{"round", r.round},
            {"replica_loss", r.replica_loss},
            {"eval_loss", r.eval_loss},
            {"pp_bytes", r.pp_bytes},
            {"dp_bytes", r.dp_bytes},
            {"bias_gap", nan_to_null(r.bias_gap)},
            {"elapsed_s", r.elapsed_s}};
}

inline json to_json(const RunReport& rep, const RunConfig& rc) {
    json rounds = json::array();
    for (const auto& r : rep.rounds) {
        rounds.push_back(to_json(r));
    }
    return {{"version", version()},
            {"config", to_json(rc)},
            {"param_count", rep.param_count},
            {"basis_k", rep.basis_k},
            {"shard_offsets", rep.shard_offsets},
            {"initial_eval_loss", rep.initial_eval_loss},
            {"final_eval_loss", rep.final_eval_loss},
            {"total_pp_bytes", rep.total_pp_bytes},
            {"total_dp_bytes", rep.total_dp_bytes},
            {"rounds", rounds}};
}

/// Shortest round-trip formatting for doubles, so CSVs compare bitwise.
inline std::string fmt(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

/// round, eval_loss, pp_bytes, dp_bytes. Data only; provenance lives in the JSON report.
inline std::string metrics_csv(const RunReport& rep) {
    std::ostringstream os;
    os << "round,eval_loss,pp_bytes,dp_bytes\n";
    for (const auto& r : rep.rounds) {
        os << r.round << ',' << fmt(r.eval_loss) << ',' << r.pp_bytes << ',' << r.dp_bytes << '\n';
    }
    return os.str();
}

/// Writes via a temporary file and rename, so readers never see a partial file.
inline void atomic_write(const std::filesystem::path& path, const std::string& data) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot write " + tmp.string());
        }
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out) {
            throw Error("short write to " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

inline void atomic_write(const std::filesystem::path& path, const wire::Bytes& data) {
    atomic_write(path, std::string(data.begin(), data.end()));
}

/// Checkpoint: one blob of serialized tensors plus a JSON manifest of names, shapes and offsets.
struct Checkpoint {
    wire::Bytes blob;
    json manifest;
};

template <Real T>
Checkpoint make_checkpoint(const ModelParams<T>& params, const EmbeddingBuffers<T>& buffers, const json& config) {
    Checkpoint ck;
    json entries = json::array();
    auto add = [&](const std::string& name, const Tensor<T>& t) {
        const auto off = ck.blob.size();
        write_tensor(ck.blob, t);
        entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", off}, {"bytes", ck.blob.size() - off}});
    };
    params.visit(add);
    add("buffers.t_perp", buffers.t_perp);
    add("buffers.pos", buffers.pos);
    ck.manifest = {{"version", version()},
                   {"precision", sizeof(T) * 8},
                   {"tensors", entries},
                   {"blob_bytes", ck.blob.size()},
                   {"config", config}};
    return ck;
}

/// Restores a checkpoint into a parameter set of matching layout.
template <Real T>
void load_checkpoint(const wire::Bytes& blob, const json& manifest, ModelParams<T>& params,
                     EmbeddingBuffers<T>& buffers) {
    std::vector<Tensor<T>*> targets;
    params.visit([&](const std::string&, Tensor<T>& t) { targets.push_back(&t); });
    targets.push_back(&buffers.t_perp);
    targets.push_back(&buffers.pos);
    const auto& entries = manifest.at("tensors");
    if (entries.size() != targets.size()) {
        throw WireFormatError("checkpoint holds " + std::to_string(entries.size()) + " tensors, expected " +
                              std::to_string(targets.size()));
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto off = entries[i].at("offset").get<std::size_t>();
        const auto len = entries[i].at("bytes").get<std::size_t>();
        if (off + len > blob.size()) {
            throw WireFormatError("checkpoint entry " + entries[i].at("name").get<std::string>() + " out of range");
        }
        auto t = deserialize<T>(std::span<const std::uint8_t>(blob.data() + off, len));
        if (t.shape() != targets[i]->shape()) {
            throw WireFormatError("checkpoint shape mismatch for " + entries[i].at("name").get<std::string>());
        }
        *targets[i] = std::move(t);
    }
}

}  // namespace hetloco::io
