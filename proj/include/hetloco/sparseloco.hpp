// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hetloco/error.hpp"
#include "hetloco/model.hpp"
#include "hetloco/tensor.hpp"
#include "hetloco/topk.hpp"

namespace hetloco {

// ---------------------------------------------------------------------------
// Inner optimizer: AdamW with global-norm clipping and a warmup + cosine schedule

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double clip_norm = 1.0;  // <= 0 disables clipping

    friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

/// Linear warmup to `peak`, then cosine decay to `final_frac * peak` at `total_steps`.
struct LrSchedule {
    double peak = 1e-3;
    std::size_t warmup = 500;
    std::size_t total_steps = 1;
    double final_frac = 0.1;

    friend bool operator==(const LrSchedule&, const LrSchedule&) = default;
};

/// Learning rate for the `step`-th update (1-based; step 0 gives 0).
inline double lr_at(std::size_t step, const LrSchedule& s) {
    if (s.warmup > 0 && step < s.warmup) {
        return s.peak * static_cast<double>(step) / static_cast<double>(s.warmup);
    }
    const double floor = s.final_frac * s.peak;
    if (s.total_steps <= s.warmup) {
        return s.peak;
    }
    const double span = static_cast<double>(s.total_steps - s.warmup);
    const double progress = std::min(1.0, static_cast<double>(step - s.warmup) / span);
    return floor + (s.peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <Real T>
struct InnerOptState {
    AdamWConfig cfg;
    LrSchedule schedule;
    std::vector<Tensor<T>> m;  // first moments, canonical parameter order
    std::vector<Tensor<T>> v;  // second moments
    std::size_t step = 0;
};

/// Scales `grads` in place so their global L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
template <Real T>
double clip_global_norm(std::vector<Tensor<T>*> grads, double max_norm) {
    double sq = 0.0;
    for (const auto* g : grads) {
        for (T x : g->data()) {
            sq += static_cast<double>(x) * static_cast<double>(x);
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T f = static_cast<T>(max_norm / norm);
        for (auto* g : grads) {
            for (T& x : g->data()) {
                x *= f;
            }
        }
    }
    return norm;
}

/// One AdamW update over matched parameter/gradient lists. Decoupled weight decay applies to
/// matrices only; gain vectors are not decayed.
template <Real T>
void adamw_update(std::vector<Tensor<T>*> params, std::vector<Tensor<T>*> grads, InnerOptState<T>& st, double lr) {
    if (params.size() != grads.size()) {
        throw DimensionError("adamw: parameter and gradient lists differ in length");
    }
    if (st.m.empty()) {
        for (auto* p : params) {
            st.m.emplace_back(p->shape());
            st.v.emplace_back(p->shape());
        }
    }
    if (st.m.size() != params.size()) {
        throw DimensionError("adamw: optimizer state does not match parameter list");
    }
    clip_global_norm(grads, st.cfg.clip_norm);
    ++st.step;
    const auto& c = st.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& p = *params[t];
        const auto& g = *grads[t];
        require_same_shape(p.shape(), g.shape(), "adamw");
        auto& m = st.m[t];
        auto& v = st.v[t];
        const double decay = p.rank() >= 2 ? c.weight_decay : 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * gi;
            const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            double pi = static_cast<double>(p[i]) * (1.0 - lr * decay);
            pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
            p[i] = static_cast<T>(pi);
        }
    }
}

// ---------------------------------------------------------------------------
// Outer loop

struct OuterConfig {
    std::size_t h = 50;        // inner steps per round
    double eta = 1.0;          // outer SGD learning rate
    double beta = 0.95;        // error-feedback decay
    ChunkSpec chunk;           // Top-k layout
    std::size_t replicas = 4;  // M
    bool dp_topk = true;       // false sends dense pseudo-gradients without error feedback

    void validate() const {
        if (h < 1) {
            throw ConfigError("outer.h must be >= 1", "outer.h");
        }
        if (!(beta >= 0.0 && beta < 1.0)) {
            throw ConfigError("outer.beta must be in [0, 1)", "outer.beta");
        }
        if (!(eta > 0.0)) {
            throw ConfigError("outer.eta must be positive", "outer.eta");
        }
        if (replicas < 1) {
            throw ConfigError("outer.replicas must be >= 1", "outer.replicas");
        }
        chunk.validate();
    }

    friend bool operator==(const OuterConfig&, const OuterConfig&) = default;
};

template <Real T>
struct ReplicaState {
    std::vector<StageParams<T>> stages;  // local copy of the model, partitioned into this replica's stages
    InnerOptState<T> opt;
    std::vector<ErrorAccumulator<T>> errors;  // canonical parameter order
    std::size_t shard = 0;
    bool compressed = false;
    double loss_sum = 0.0;   // inner losses since the last sync
    std::size_t loss_count = 0;
};

template <Real T>
std::vector<Tensor<T>*> param_ptrs(std::vector<StageParams<T>>& stages) {
    std::vector<Tensor<T>*> out;
    for_each_param(stages, [&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
    return out;
}

template <Real T>
std::vector<Tensor<T>*> param_ptrs(StageParams<T>& params) {
    std::vector<Tensor<T>*> out;
    params.visit([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
    return out;
}

/// Clips, applies one AdamW step with the scheduled learning rate and records the loss.
template <Real T>
void apply_inner_update(ReplicaState<T>& r, std::vector<StageParams<T>>& grads, double loss) {
    if (!std::isfinite(loss)) {
        throw NumericalError("non-finite inner loss at step " + std::to_string(r.opt.step + 1));
    }
    const double lr = lr_at(r.opt.step + 1, r.opt.schedule);
    adamw_update(param_ptrs(r.stages), param_ptrs(grads), r.opt, lr);
    r.loss_sum += loss;
    ++r.loss_count;
}

/// Token batch: inputs and next-token targets, each batch * seq long.
struct Batch {
    std::vector<std::int32_t> inputs;
    std::vector<std::int32_t> targets;
    std::size_t batch = 0;
    std::size_t seq = 0;
};

/// One uncompressed inner step (forward and backward through the replica's stage chain).
template <Real T>
double inner_step(const ModelConfig& cfg, ReplicaState<T>& r, const EmbeddingBuffers<T>& buffers, const Batch& b) {
    auto res = chain_loss_and_grads(cfg, r.stages, buffers, b.inputs, b.targets, b.batch, b.seq);
    apply_inner_update(r, res.grads, res.loss);
    return res.loss;
}

/// delta_m = theta_global - theta_m, in canonical parameter order.
template <Real T>
std::vector<Tensor<T>> pseudo_gradient(const ModelParams<T>& global, const ReplicaState<T>& r) {
    const auto local = reassemble(r.stages);
    std::vector<Tensor<T>> out;
    std::vector<const Tensor<T>*> g;
    global.visit([&](const std::string&, const Tensor<T>& t) { g.push_back(&t); });
    std::size_t i = 0;
    local.visit([&](const std::string& name, const Tensor<T>& t) {
        if (i >= g.size()) {
            throw DimensionError("pseudo_gradient: replica has extra parameter " + name);
        }
        out.push_back(sub(*g[i], t));
        ++i;
    });
    if (i != g.size()) {
        throw DimensionError("pseudo_gradient: replica is missing parameters");
    }
    return out;
}

/// e <- beta e + delta; delta_hat = Q(TopK(e)); e <- e - delta_hat.
template <Real T>
std::vector<SparseDelta<T>> compress_pseudograd(ReplicaState<T>& r, const std::vector<Tensor<T>>& delta,
                                                const OuterConfig& cfg) {
    if (r.errors.empty()) {
        for (const auto& d : delta) {
            r.errors.push_back({Tensor<T>(d.shape()), static_cast<T>(cfg.beta)});
        }
    }
    if (r.errors.size() != delta.size()) {
        throw DimensionError("compress_pseudograd: error accumulators do not match parameters");
    }
    std::vector<SparseDelta<T>> out;
    out.reserve(delta.size());
    for (std::size_t i = 0; i < delta.size(); ++i) {
        auto& acc = r.errors[i];
        ef_accumulate(acc, delta[i]);
        auto sd = quantize(topk_chunks(acc.e, cfg.chunk));
        ef_subtract(acc, sd);
        out.push_back(std::move(sd));
    }
    return out;
}

/// One replica's outer-round contribution: sparse (Top-k) or dense.
template <Real T>
using Contribution = std::variant<std::vector<SparseDelta<T>>, std::vector<Tensor<T>>>;

/// Mean of all densified contributions in replica-index order.
template <Real T>
std::vector<Tensor<T>> aggregate(const std::vector<Contribution<T>>& contributions, const ModelParams<T>& like) {
    std::vector<Tensor<T>> sum;
    like.visit([&](const std::string&, const Tensor<T>& t) { sum.emplace_back(t.shape()); });
    for (std::size_t m = 0; m < contributions.size(); ++m) {
        const auto& c = contributions[m];
        const std::size_t count = std::visit([](const auto& v) { return v.size(); }, c);
        if (count != sum.size()) {
            throw SyncError("replica " + std::to_string(m) + " sent " + std::to_string(count) + " tensors, expected " +
                            std::to_string(sum.size()));
        }
        for (std::size_t i = 0; i < sum.size(); ++i) {
            const Tensor<T> dense = std::holds_alternative<std::vector<Tensor<T>>>(c)
                                        ? std::get<std::vector<Tensor<T>>>(c)[i]
                                        : densify(std::get<std::vector<SparseDelta<T>>>(c)[i]);
            require_same_shape(sum[i].shape(), dense.shape(), "aggregate");
            for (std::size_t j = 0; j < dense.size(); ++j) {
                sum[i][j] += dense[j];
            }
        }
    }
    const T inv_m = static_cast<T>(1.0 / static_cast<double>(contributions.size()));
    for (auto& s : sum) {
        for (T& v : s.data()) {
            v *= inv_m;
        }
    }
    return sum;
}

/// theta <- theta - eta * mean(delta_hat). Requires exactly `expected_replicas` contributions.
template <Real T>
void outer_round(ModelParams<T>& global, const std::vector<Contribution<T>>& contributions, double eta,
                 std::size_t expected_replicas) {
    if (contributions.size() != expected_replicas) {
        throw SyncError("outer round received " + std::to_string(contributions.size()) + " contributions, expected " +
                        std::to_string(expected_replicas));
    }
    const auto mean = aggregate(contributions, global);
    std::size_t i = 0;
    const T step = static_cast<T>(eta);
    global.visit([&](const std::string&, Tensor<T>& t) {
        for (std::size_t j = 0; j < t.size(); ++j) {
            t[j] -= step * mean[i][j];
        }
        ++i;
    });
}

}  // namespace hetloco
