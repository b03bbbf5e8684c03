// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "hetloco/data.hpp"
#include "hetloco/error.hpp"
#include "hetloco/linalg.hpp"
#include "hetloco/model.hpp"
#include "hetloco/rng.hpp"
#include "hetloco/sparseloco.hpp"
#include "hetloco/subspace.hpp"
#include "hetloco/tensor.hpp"
#include "hetloco/topk.hpp"

namespace hetloco {

// ---------------------------------------------------------------------------
// Cluster description

struct ReplicaSpec {
    std::size_t id = 0;
    bool pp_compressed = false;
    std::size_t stages = 1;
    double k_over_d = 1.0;
    std::size_t shard = 0;

    /// Transmitted width at a compressed boundary.
    std::size_t width(std::size_t d_model) const {
        return pp_compressed ? static_cast<std::size_t>(std::llround(k_over_d * static_cast<double>(d_model)))
                             : d_model;
    }

    void validate(const ModelConfig& m) const {
        if (stages == 0 || m.n_layers % stages != 0) {
            throw ConfigError("replica " + std::to_string(id) + ": " + std::to_string(stages) +
                                  " stages do not divide " + std::to_string(m.n_layers) + " layers",
                              "cluster.stages");
        }
        if (pp_compressed) {
            if (!(k_over_d > 0.0 && k_over_d <= 1.0)) {
                throw ConfigError("replica " + std::to_string(id) + ": k_over_d must be in (0, 1]", "cluster.k_over_d");
            }
            if (stages < 2) {
                throw ConfigError("replica " + std::to_string(id) + ": compression needs at least 2 stages",
                                  "cluster.stages");
            }
            if (width(m.d_model) == 0) {
                throw ConfigError("k_over_d rounds to zero basis columns", "cluster.k_over_d");
            }
        }
    }

    friend bool operator==(const ReplicaSpec&, const ReplicaSpec&) = default;
};

enum class OptimizerMode { sparseloco, ddp };

inline const char* to_string(OptimizerMode m) { return m == OptimizerMode::ddp ? "ddp" : "sparseloco"; }

struct ClusterConfig {
    ModelConfig model;
    OuterConfig outer;
    AdamWConfig adamw;
    double lr = 3e-3;
    std::size_t warmup = 30;
    double final_lr_frac = 0.1;
    std::vector<ReplicaSpec> replicas;
    std::size_t rounds = 60;
    std::size_t batch = 4;  // sequences per replica per inner step
    std::size_t eval_batches = 4;
    std::uint64_t model_seed = 1;
    std::uint64_t data_seed = 2;
    std::uint64_t basis_seed = 3;
    bool embed_adapt = true;
    bool project_weights = false;
    OptimizerMode mode = OptimizerMode::sparseloco;
    std::string preset = "custom";
    std::size_t threads = 1;

    std::size_t num_compressed() const {
        std::size_t n = 0;
        for (const auto& r : replicas) {
            n += r.pp_compressed ? 1 : 0;
        }
        return n;
    }

    /// Fraction of replicas running uncompressed.
    double alpha() const {
        return static_cast<double>(replicas.size() - num_compressed()) / static_cast<double>(replicas.size());
    }

    std::size_t total_inner_steps() const { return rounds * outer.h; }

    LrSchedule schedule() const { return {lr, warmup, total_inner_steps(), final_lr_frac}; }

    /// Basis width shared by all compressed replicas (0 when none is compressed).
    std::size_t basis_k() const {
        for (const auto& r : replicas) {
            if (r.pp_compressed) {
                return r.width(model.d_model);
            }
        }
        return 0;
    }

    void validate() const {
        model.validate();
        outer.validate();
        if (replicas.empty() || replicas.size() != outer.replicas) {
            throw ConfigError("cluster has " + std::to_string(replicas.size()) + " replica specs but outer.replicas is " +
                                  std::to_string(outer.replicas),
                              "cluster.replicas");
        }
        std::size_t k = 0;
        for (std::size_t i = 0; i < replicas.size(); ++i) {
            const auto& r = replicas[i];
            if (r.id != i) {
                throw ConfigError("replica ids must be 0..M-1 in order", "cluster.replicas");
            }
            r.validate(model);
            if (r.shard >= replicas.size()) {
                throw ConfigError("replica " + std::to_string(i) + " has shard out of range", "cluster.replicas");
            }
            if (r.pp_compressed) {
                const auto w = r.width(model.d_model);
                if (k != 0 && w != k) {
                    throw ConfigError("compressed replicas must share one basis width", "cluster.k_over_d");
                }
                k = w;
            }
        }
        if (rounds == 0) {
            throw ConfigError("rounds must be >= 1", "outer.rounds");
        }
        if (batch == 0 || eval_batches == 0) {
            throw ConfigError("batch sizes must be positive", "data.batch");
        }
        if (!(lr > 0.0)) {
            throw ConfigError("inner lr must be positive", "inner.lr");
        }
        if (threads == 0) {
            throw ConfigError("threads must be >= 1", "threads");
        }
    }
};

/// Number of compressed replicas for an uncompressed fraction alpha; alpha * M must be integral.
inline std::size_t compressed_count(double alpha, std::size_t m) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ConfigError("alpha must be in [0, 1]", "cluster.alpha");
    }
    const double uncompressed = alpha * static_cast<double>(m);
    const double rounded = std::round(uncompressed);
    if (std::abs(uncompressed - rounded) > 1e-9) {
        throw ConfigError("alpha = " + std::to_string(alpha) + " needs alpha * M integral, M = " + std::to_string(m),
                          "cluster.alpha");
    }
    return m - static_cast<std::size_t>(rounded);
}

/// Spreads `n_compressed` compressed replicas evenly over M indices. With n = M/2 the odd indices
/// are compressed.
inline std::vector<ReplicaSpec> assign_replicas(std::size_t m, std::size_t n_compressed, std::size_t stages,
                                                double k_over_d) {
    std::vector<ReplicaSpec> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        out[i].id = i;
        out[i].shard = i;
        out[i].stages = stages;
        out[i].pp_compressed = (i + 1) * n_compressed / m > i * n_compressed / m;
        out[i].k_over_d = out[i].pp_compressed ? k_over_d : 1.0;
    }
    return out;
}

/// Fills in `base.replicas` (and the optimizer mode) for a named preset:
/// baseline, uniform, het_half, het (uses alpha) or ddp (uses alpha).
inline ClusterConfig apply_preset(ClusterConfig base, const std::string& preset, std::size_t m, std::size_t stages,
                                  double k_over_d, double alpha = 1.0) {
    std::size_t nc = 0;
    if (preset == "baseline") {
        nc = 0;
    } else if (preset == "uniform") {
        nc = m;
    } else if (preset == "het_half") {
        if (m % 2 != 0) {
            throw ConfigError("het_half needs an even replica count, got " + std::to_string(m), "cluster.replicas");
        }
        nc = m / 2;
    } else if (preset == "het" || preset == "ddp") {
        nc = compressed_count(alpha, m);
    } else {
        throw ConfigError("unknown preset '" + preset + "'", "cluster.preset");
    }
    base.preset = preset;
    base.mode = preset == "ddp" ? OptimizerMode::ddp : OptimizerMode::sparseloco;
    base.outer.replicas = m;
    base.replicas = assign_replicas(m, nc, stages, k_over_d);
    return base;
}

// ---------------------------------------------------------------------------
// Channels and pipelined execution

/// In-process link that meters every message it carries.
struct Channel {
    std::uint64_t bytes = 0;
    std::uint64_t messages = 0;

    wire::Bytes carry(wire::Bytes b) {
        bytes += b.size();
        ++messages;
        return b;
    }
};

namespace detail {

template <Real T>
ActivationPacket<T> send_forward(const ActivationPacket<T>& out, const EmbeddingBuffers<T>& buffers,
                                 const ProjectionBasis<T>* basis, Channel* ch) {
    auto transmit = [&](wire::Bytes b) { return ch ? ch->carry(std::move(b)) : b; };
    if (basis) {
        const auto c = compress_activation(out, buffers, *basis);
        const auto bytes = transmit(encode_packet(c));
        return reconstruct_activation(decode_packet<T>(bytes), buffers, *basis);
    }
    const auto bytes = transmit(encode_packet(out));
    return decode_packet<T>(bytes);
}

template <Real T>
Tensor<T> send_backward(const Tensor<T>& g, std::size_t batch, std::size_t seq, const ProjectionBasis<T>* basis,
                        Channel* ch) {
    auto transmit = [&](wire::Bytes b) { return ch ? ch->carry(std::move(b)) : b; };
    if (basis) {
        const auto bytes = transmit(encode_packet(compress_grad(g, *basis), batch, seq, true, nullptr));
        return reconstruct_grad(decode_packet<T>(bytes).x, *basis);
    }
    const auto bytes = transmit(encode_packet(g, batch, seq, false, nullptr));
    return decode_packet<T>(bytes).x;
}

}  // namespace detail

/// Forward and backward through a stage chain whose boundaries go over `ch`. With a basis, every
/// forward packet and backward gradient crossing a boundary is subspace-compressed.
template <Real T>
ChainResult<T> pipeline_loss_and_grads(const ModelConfig& cfg, const std::vector<StageParams<T>>& stages,
                                       const EmbeddingBuffers<T>& buffers, const ProjectionBasis<T>* basis,
                                       const Batch& b, Channel* ch) {
    ActivationPacket<T> pkt;
    pkt.token_ids = b.inputs;
    pkt.batch = b.batch;
    pkt.seq = b.seq;
    std::vector<StageTape<T>> tapes;
    tapes.reserve(stages.size());
    for (std::size_t s = 0; s < stages.size(); ++s) {
        auto fw = forward_stage(cfg, stages[s], buffers, pkt, static_cast<int>(s));
        tapes.push_back(std::move(fw.tape));
        pkt = s + 1 < stages.size() ? detail::send_forward(fw.out, buffers, basis, ch) : std::move(fw.out);
    }
    auto lr = cross_entropy(pkt.x, b.targets);
    ChainResult<T> res;
    res.loss = lr.loss;
    res.grads.resize(stages.size());
    Tensor<T> g = std::move(lr.grad);
    for (std::size_t s = stages.size(); s-- > 0;) {
        auto bw = backward_stage(cfg, stages[s], tapes[s], g);
        res.grads[s] = std::move(bw.grads);
        if (s > 0) {
            if (!bw.grad_out.all_finite()) {
                throw NumericalError("non-finite boundary gradient", -1, static_cast<int>(s));
            }
            g = detail::send_backward(bw.grad_out, b.batch, b.seq, basis, ch);
        }
    }
    return res;
}

/// Forward-only loss through the same (possibly compressed) chain.
template <Real T>
double pipeline_loss(const ModelConfig& cfg, const std::vector<StageParams<T>>& stages,
                     const EmbeddingBuffers<T>& buffers, const ProjectionBasis<T>* basis, const Batch& b) {
    ActivationPacket<T> pkt;
    pkt.token_ids = b.inputs;
    pkt.batch = b.batch;
    pkt.seq = b.seq;
    for (std::size_t s = 0; s < stages.size(); ++s) {
        auto out = forward_stage(cfg, stages[s], buffers, pkt, static_cast<int>(s)).out;
        pkt = s + 1 < stages.size() ? detail::send_forward(out, buffers, basis, nullptr) : std::move(out);
    }
    return cross_entropy(pkt.x, b.targets).loss;
}

/// Bytes one inner step puts on a replica's inter-stage links under the packet wire format.
inline std::uint64_t pp_step_bytes(const ReplicaSpec& r, std::size_t d_model, std::size_t batch, std::size_t seq) {
    if (r.stages < 2) {
        return 0;
    }
    const std::size_t w = r.width(d_model);
    return (r.stages - 1) * (packet_wire_bytes(batch, seq, w, true) + packet_wire_bytes(batch, seq, w, false));
}

// ---------------------------------------------------------------------------
// Replicas, inner phase, synchronization

template <Real T>
struct ReplicaRuntime {
    ReplicaSpec spec;
    ReplicaState<T> state;
    std::optional<BatchSampler> sampler;
    Channel pp;
    Channel dp;
};

/// Runs f(i) for i in [0, n) on up to `threads` workers. The first exception by index is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& f) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            f(i);
        }
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    const std::size_t workers = std::min(threads, n);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                try {
                    f(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

template <Real T>
std::vector<StageParams<T>> partition_for(const ModelParams<T>& global, const ReplicaSpec& spec) {
    return partition(global, spec.stages);
}

/// H inner steps on one replica. Numerical failures are re-raised tagged with the replica id.
template <Real T>
void run_inner_phase(const ClusterConfig& cfg, ReplicaRuntime<T>& r, const EmbeddingBuffers<T>& buffers,
                     const ProjectionBasis<T>* basis, std::size_t h) {
    const ProjectionBasis<T>* b = r.spec.pp_compressed ? basis : nullptr;
    if (r.spec.pp_compressed && !b) {
        throw ConfigError("compressed replica without a projection basis");
    }
    for (std::size_t step = 0; step < h; ++step) {
        try {
            const Batch batch = r.sampler->next();
            auto res = pipeline_loss_and_grads(cfg.model, r.state.stages, buffers, b, batch, &r.pp);
            apply_inner_update(r.state, res.grads, res.loss);
        } catch (const NumericalError& e) {
            throw NumericalError(std::string(e.what()) + " (replica " + std::to_string(r.spec.id) + ")",
                                 static_cast<int>(r.spec.id), e.stage());
        }
        if (cfg.project_weights && b) {
            for (auto& st : r.state.stages) {
                st = project_weights(std::move(st), *b);
            }
        }
    }
}

struct SyncStats {
    std::uint64_t dp_bytes = 0;
    double bias_gap = std::numeric_limits<double>::quiet_NaN();
};

/// Frobenius norm of mean(compressed contributions) - mean(uncompressed contributions), or NaN when
/// one group is empty.
template <Real T>
double group_gap(const std::vector<Contribution<T>>& contributions, const std::vector<ReplicaRuntime<T>>& replicas,
                 const ModelParams<T>& like) {
    std::vector<Contribution<T>> comp;
    std::vector<Contribution<T>> unc;
    for (std::size_t m = 0; m < replicas.size(); ++m) {
        (replicas[m].spec.pp_compressed ? comp : unc).push_back(contributions[m]);
    }
    if (comp.empty() || unc.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    const auto a = aggregate(comp, like);
    const auto b = aggregate(unc, like);
    double sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double f = frobenius(sub(a[i], b[i]));
        sq += f * f;
    }
    return std::sqrt(sq);
}

/// Outer synchronization: pseudo-gradients, DP exchange through each replica's DP channel,
/// averaging, the outer step, embedding re-projection and broadcast.
template <Real T>
SyncStats global_sync(const ClusterConfig& cfg, ModelParams<T>& global, std::vector<ReplicaRuntime<T>>& replicas,
                      EmbeddingBuffers<T>& buffers, const ProjectionBasis<T>* basis, bool reproject) {
    if (replicas.size() != cfg.outer.replicas) {
        throw SyncError("expected " + std::to_string(cfg.outer.replicas) + " replicas at sync, have " +
                        std::to_string(replicas.size()));
    }
    SyncStats stats;
    std::vector<Shape> shapes;
    global.visit([&](const std::string&, const Tensor<T>& t) { shapes.push_back(t.shape()); });

    std::vector<Contribution<T>> contributions;
    contributions.reserve(replicas.size());
    for (auto& r : replicas) {
        const auto delta = pseudo_gradient(global, r.state);
        const std::uint64_t before = r.dp.bytes;
        if (cfg.outer.dp_topk) {
            const auto sds = compress_pseudograd(r.state, delta, cfg.outer);
            std::vector<SparseDelta<T>> received;
            received.reserve(sds.size());
            for (std::size_t i = 0; i < sds.size(); ++i) {
                const auto bytes = r.dp.carry(encode_sparse(sds[i]));
                received.push_back(decode_sparse<T>(bytes, shapes[i]));
            }
            contributions.emplace_back(std::move(received));
        } else {
            std::vector<Tensor<T>> received;
            received.reserve(delta.size());
            for (const auto& d : delta) {
                const auto bytes = r.dp.carry(serialize(d.template cast<float>()));
                received.push_back(deserialize<T>(bytes));
            }
            contributions.emplace_back(std::move(received));
        }
        // The averaged update comes back at the same volume.
        const std::uint64_t up = r.dp.bytes - before;
        r.dp.bytes += up;
        stats.dp_bytes += 2 * up;
    }
    stats.bias_gap = group_gap(contributions, replicas, global);
    outer_round(global, contributions, cfg.outer.eta, cfg.outer.replicas);
    if (reproject && basis) {
        reproject_embedding(global.embed, buffers.t_perp, *basis);
    }
    for (auto& r : replicas) {
        r.state.stages = partition_for(global, r.spec);
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Bias decomposition of the aggregated update

template <Real T>
struct BiasReport {
    double alpha = 1.0;
    Tensor<T> delta;       // ideal dense pseudo-gradient
    Tensor<T> delta_proj;  // its projection onto the subspace
    Tensor<T> bias;        // delta - delta_proj
    Tensor<T> delta_het;   // alpha delta + (1 - alpha) delta_proj
    double norm_delta = 0.0;
    double norm_proj = 0.0;
    double norm_bias = 0.0;
    double norm_het = 0.0;
    /// max |(alpha delta + (1 - alpha) delta_proj) - (delta - (1 - alpha) bias)|
    double identity_gap = 0.0;
};

/// Projects the trailing axis of `delta` (width d) and forms the heterogeneous mean.
template <Real T>
BiasReport<T> bias_decompose(const Tensor<T>& delta, const ProjectionBasis<T>& basis, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ConfigError("alpha must be in [0, 1]", "alpha");
    }
    BiasReport<T> r;
    r.alpha = alpha;
    r.delta = delta;
    r.delta_proj = project(delta, basis);
    r.bias = sub(delta, r.delta_proj);
    r.delta_het = Tensor<T>(delta.shape());
    Tensor<T> alt(delta.shape());
    const T a = static_cast<T>(alpha);
    const T one_minus = static_cast<T>(1.0 - alpha);
    for (std::size_t i = 0; i < delta.size(); ++i) {
        r.delta_het[i] = a * delta[i] + one_minus * r.delta_proj[i];
        alt[i] = delta[i] - one_minus * r.bias[i];
    }
    r.identity_gap = static_cast<double>(max_abs_diff(r.delta_het, alt));
    if (r.identity_gap > 1e3 * std::numeric_limits<T>::epsilon() * std::max<double>(1.0, max_abs(delta))) {
        throw NumericalError("bias decomposition forms disagree by " + std::to_string(r.identity_gap));
    }
    r.norm_delta = frobenius(r.delta);
    r.norm_proj = frobenius(r.delta_proj);
    r.norm_bias = frobenius(r.bias);
    r.norm_het = frobenius(r.delta_het);
    return r;
}

/// Parameters whose trailing axis lives in the residual stream.
inline bool writes_residual(const std::string& name) {
    auto ends_with = [&](const char* s) {
        const std::string suf(s);
        return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    return name == "embed" || ends_with(".wo") || ends_with(".w_down");
}

/// Aggregate bias norms over a full pseudo-gradient. Residual-writing tensors are projected; the
/// rest pass through unchanged (zero bias).
template <Real T>
BiasReport<T> bias_decompose(const ModelParams<T>& delta, const ProjectionBasis<T>& basis, double alpha) {
    double nd = 0.0, np = 0.0, nb = 0.0, nh = 0.0, gap = 0.0;
    delta.visit([&](const std::string& name, const Tensor<T>& t) {
        if (writes_residual(name)) {
            const auto r = bias_decompose(t, basis, alpha);
            nd += r.norm_delta * r.norm_delta;
            np += r.norm_proj * r.norm_proj;
            nb += r.norm_bias * r.norm_bias;
            nh += r.norm_het * r.norm_het;
            gap = std::max(gap, r.identity_gap);
        } else {
            const double f = frobenius(t);
            nd += f * f;
            np += f * f;
            nh += f * f;
        }
    });
    BiasReport<T> r;
    r.alpha = alpha;
    r.norm_delta = std::sqrt(nd);
    r.norm_proj = std::sqrt(np);
    r.norm_bias = std::sqrt(nb);
    r.norm_het = std::sqrt(nh);
    r.identity_gap = gap;
    return r;
}

// ---------------------------------------------------------------------------
// Experiment driver

struct RoundRecord {
    std::size_t round = 0;
    std::vector<double> replica_loss;  // mean inner loss per replica over the round
    double eval_loss = 0.0;
    std::uint64_t pp_bytes = 0;
    std::uint64_t dp_bytes = 0;
    double bias_gap = std::numeric_limits<double>::quiet_NaN();
    double elapsed_s = 0.0;
};

struct RunReport {
    std::vector<RoundRecord> rounds;  // rounds[0] is the initial evaluation
    double initial_eval_loss = 0.0;
    double final_eval_loss = 0.0;
    std::uint64_t total_pp_bytes = 0;
    std::uint64_t total_dp_bytes = 0;
    std::size_t param_count = 0;
    std::size_t basis_k = 0;
    std::vector<std::uint64_t> shard_offsets;
};

template <Real T>
struct RunResult {
    RunReport report;
    ModelParams<T> params;
    EmbeddingBuffers<T> buffers;
};

inline constexpr std::uint64_t kModelInitStream = 0x30de1;
inline constexpr std::uint64_t kSamplerStreamBase = 0xda7a0000;

/// Mean eval loss of `global` under every replica's pipeline mode.
template <Real T>
double eval_loss(const ClusterConfig& cfg, const ModelParams<T>& global, const EmbeddingBuffers<T>& buffers,
                 const ProjectionBasis<T>* basis, const std::vector<Batch>& batches) {
    std::map<std::pair<bool, std::size_t>, double> cache;
    double total = 0.0;
    for (const auto& spec : cfg.replicas) {
        const auto key = std::make_pair(spec.pp_compressed, spec.stages);
        auto it = cache.find(key);
        if (it == cache.end()) {
            const auto stages = partition(global, spec.stages);
            double sum = 0.0;
            for (const auto& b : batches) {
                sum += pipeline_loss(cfg.model, stages, buffers, spec.pp_compressed ? basis : nullptr, b);
            }
            it = cache.emplace(key, sum / static_cast<double>(batches.size())).first;
        }
        total += it->second;
    }
    return total / static_cast<double>(cfg.replicas.size());
}

/// Runs the configured number of outer rounds. `on_round` (optional) sees each record as it is
/// produced.
template <Real T>
RunResult<T> run_experiment(const ClusterConfig& cfg, const Corpus& corpus,
                            const std::function<void(const RoundRecord&)>& on_round = {}) {
    cfg.validate();
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };

    RngStream init_rng(cfg.model_seed, kModelInitStream);
    auto st = init_model<T>(cfg.model, init_rng);
    ModelParams<T> global = std::move(st.params);
    EmbeddingBuffers<T> buffers = std::move(st.buffers);

    const std::size_t k = cfg.basis_k();
    std::optional<ProjectionBasis<T>> basis;
    bool reproject = false;
    if (k > 0) {
        basis = make_basis<T>(cfg.basis_seed, cfg.model.d_model, k);
        if (cfg.embed_adapt) {
            auto split = split_embedding(global.embed, *basis);
            global.embed = std::move(split.t_s);
            buffers.t_perp = std::move(split.t_perp);
            reproject = true;
        } else {
            buffers.t_perp = global.embed;
            global.embed.fill(T{0});
        }
    }
    const ProjectionBasis<T>* bp = basis ? &*basis : nullptr;

    const std::size_t seq = cfg.model.seq_len;
    const auto shards = shard_data(corpus.train, cfg.replicas.size(), seq + 1);
    const auto evals = eval_batches(corpus.eval, cfg.eval_batches, cfg.batch, seq);

    std::vector<ReplicaRuntime<T>> reps(cfg.replicas.size());
    for (std::size_t m = 0; m < reps.size(); ++m) {
        auto& r = reps[m];
        r.spec = cfg.replicas[m];
        r.state.stages = partition_for(global, r.spec);
        r.state.opt.cfg = cfg.adamw;
        r.state.opt.schedule = cfg.schedule();
        r.state.shard = r.spec.shard;
        r.state.compressed = r.spec.pp_compressed;
        r.sampler.emplace(shards[r.spec.shard], cfg.batch, seq, cfg.data_seed, kSamplerStreamBase + m);
    }

    RunResult<T> out;
    auto& rep = out.report;
    rep.param_count = global.param_count();
    rep.basis_k = k;
    for (const auto& s : shards) {
        rep.shard_offsets.push_back(s.offset);
    }

    RoundRecord r0;
    r0.eval_loss = eval_loss(cfg, global, buffers, bp, evals);
    r0.elapsed_s = elapsed();
    rep.initial_eval_loss = r0.eval_loss;
    rep.rounds.push_back(r0);
    if (on_round) {
        on_round(r0);
    }

    // DDP keeps one optimizer over the full parameter set.
    ReplicaState<T> ddp;
    if (cfg.mode == OptimizerMode::ddp) {
        ddp.opt.cfg = cfg.adamw;
        ddp.opt.schedule = cfg.schedule();
    }

    for (std::size_t round = 1; round <= cfg.rounds; ++round) {
        RoundRecord rec;
        rec.round = round;
        std::vector<std::uint64_t> pp_before;
        for (auto& r : reps) {
            pp_before.push_back(r.pp.bytes);
            r.state.loss_sum = 0.0;
            r.state.loss_count = 0;
        }

        if (cfg.mode == OptimizerMode::sparseloco) {
            parallel_for(reps.size(), cfg.threads,
                         [&](std::size_t m) { run_inner_phase(cfg, reps[m], buffers, bp, cfg.outer.h); });
            const auto sync = global_sync(cfg, global, reps, buffers, bp, reproject);
            rec.dp_bytes = sync.dp_bytes;
            rec.bias_gap = sync.bias_gap;
        } else {
            const std::uint64_t dense_bytes = 2 * 4 * static_cast<std::uint64_t>(global.param_count());
            for (std::size_t step = 0; step < cfg.outer.h; ++step) {
                std::vector<ChainResult<T>> results(reps.size());
                parallel_for(reps.size(), cfg.threads, [&](std::size_t m) {
                    auto& r = reps[m];
                    const Batch b = r.sampler->next();
                    results[m] = pipeline_loss_and_grads(cfg.model, r.state.stages, buffers,
                                                         r.spec.pp_compressed ? bp : nullptr, b, &r.pp);
                });
                auto mean = global.zeros_like();
                auto mean_ptrs = param_ptrs(mean);
                for (std::size_t m = 0; m < reps.size(); ++m) {
                    auto full = reassemble(results[m].grads);
                    auto g = param_ptrs(full);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        for (std::size_t j = 0; j < g[i]->size(); ++j) {
                            (*mean_ptrs[i])[j] += (*g[i])[j];
                        }
                    }
                    reps[m].state.loss_sum += results[m].loss;
                    ++reps[m].state.loss_count;
                    reps[m].dp.bytes += dense_bytes;
                    rec.dp_bytes += dense_bytes;
                }
                const T inv_m = static_cast<T>(1.0 / static_cast<double>(reps.size()));
                for (auto* t : mean_ptrs) {
                    for (T& v : t->data()) {
                        v *= inv_m;
                    }
                }
                double loss = 0.0;
                for (const auto& res : results) {
                    loss += res.loss;
                }
                ddp.stages = {std::move(global)};
                std::vector<StageParams<T>> grads{std::move(mean)};
                apply_inner_update(ddp, grads, loss / static_cast<double>(reps.size()));
                global = std::move(ddp.stages.front());
                ddp.stages.clear();
                if (reproject && bp) {
                    reproject_embedding(global.embed, buffers.t_perp, *bp);
                }
                for (auto& r : reps) {
                    r.state.stages = partition_for(global, r.spec);
                }
            }
        }

        for (std::size_t m = 0; m < reps.size(); ++m) {
            const auto& s = reps[m].state;
            rec.replica_loss.push_back(s.loss_count ? s.loss_sum / static_cast<double>(s.loss_count) : 0.0);
            rec.pp_bytes += reps[m].pp.bytes - pp_before[m];
        }
        rec.eval_loss = eval_loss(cfg, global, buffers, bp, evals);
        if (!std::isfinite(rec.eval_loss)) {
            throw NumericalError("non-finite eval loss at round " + std::to_string(round));
        }
        rec.elapsed_s = elapsed();
        rep.total_pp_bytes += rec.pp_bytes;
        rep.total_dp_bytes += rec.dp_bytes;
        rep.rounds.push_back(rec);
        if (on_round) {
            on_round(rec);
        }
    }
    rep.final_eval_loss = rep.rounds.back().eval_loss;
    out.params = std::move(global);
    out.buffers = std::move(buffers);
    return out;
}

}  // namespace hetloco
