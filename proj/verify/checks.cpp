// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#include "checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "hetloco/hetloco.hpp"
#include "hetloco/io.hpp"

#ifndef HETLOCO_SOURCE_DIR
#define HETLOCO_SOURCE_DIR "."
#endif

namespace hetloco::verify {
namespace {

std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

std::string fix(double v, int prec = 4) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

CheckResult verdict(bool ok, std::string detail) { return {ok, std::move(detail)}; }

std::vector<std::int32_t> random_tokens(RngStream& rng, std::size_t n, std::size_t vocab) {
    std::vector<std::int32_t> out(n);
    for (auto& t : out) {
        t = static_cast<std::int32_t>(rng.below(vocab));
    }
    return out;
}

// d=16, 4 layers, 2 heads, vocab 32, L=8.
ModelConfig tiny_model() {
    ModelConfig m;
    m.d_model = 16;
    m.n_layers = 4;
    m.n_heads = 2;
    m.ffn_mult = 2.0;
    m.vocab = 32;
    m.seq_len = 8;
    m.precision_bits = 64;
    return m;
}

template <Real T>
std::vector<std::pair<std::string, const Tensor<T>*>> named(const ModelParams<T>& p) {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    p.visit([&](const std::string& n, const Tensor<T>& t) { out.emplace_back(n, &t); });
    return out;
}

// Independent orthogonal projector applied in double: x (I - U U^T) residual rows.
double out_of_subspace_norm(const Tensor<float>& residual, const Tensor<float>& u) {
    const std::size_t d = u.extent(0);
    const std::size_t k = u.extent(1);
    double sq = 0.0;
    for (std::size_t r = 0; r < residual.rows(); ++r) {
        const auto x = residual.row(r);
        std::vector<double> coord(k, 0.0);
        for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t i = 0; i < d; ++i) {
                coord[j] += static_cast<double>(x[i]) * static_cast<double>(u(i, j));
            }
        }
        for (std::size_t i = 0; i < d; ++i) {
            double p = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                p += static_cast<double>(u(i, j)) * coord[j];
            }
            const double o = static_cast<double>(x[i]) - p;
            sq += o * o;
        }
    }
    return std::sqrt(sq);
}

const Corpus& desk_corpus(const Options& opt) {
    static std::map<std::string, Corpus> cache;
    auto it = cache.find(opt.corpus_path);
    if (it == cache.end()) {
        it = cache.emplace(opt.corpus_path, load_corpus(opt.corpus_path, 0.05)).first;
    }
    return it->second;
}

// Small float model for optimizer and run-level checks.
ClusterConfig small_cluster(std::size_t m, std::size_t stages) {
    ClusterConfig c;
    c.model.d_model = 16;
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.ffn_mult = 2.0;
    c.model.vocab = 256;
    c.model.seq_len = 16;
    c.outer.h = 3;
    c.outer.replicas = m;
    c.rounds = 3;
    c.batch = 2;
    c.eval_batches = 2;
    c.lr = 1e-3;
    c.warmup = 5;
    c.replicas = assign_replicas(m, 0, stages, 1.0);
    return c;
}

// ---------------------------------------------------------------------------

CheckResult c01_orthonormality() {
    double worst_orth = 0.0;
    double worst_idem = 0.0;
    RngStream rng(101, 1);
    for (std::size_t d : {16, 64, 512}) {
        for (std::size_t k : {std::size_t{1}, d / 8, d}) {
            const auto b = make_basis<double>(1000 + d + k, d, k);
            const auto& u = b.u;
            for (std::size_t i = 0; i < k; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < d; ++r) {
                        s += u(r, i) * u(r, j);
                    }
                    worst_orth = std::max(worst_orth, std::abs(s - (i == j ? 1.0 : 0.0)));
                }
            }
            const auto x = gaussian<double>(rng, {8, d});
            const auto p1 = project(x, b);
            const auto p2 = project(p1, b);
            worst_idem = std::max(worst_idem, max_abs_diff(p1, p2));
        }
    }
    return verdict(worst_orth < 1e-10 && worst_idem < 1e-9,
                   "max |U^T U - I| = " + sci(worst_orth) + " (< 1e-10), max idempotence gap = " + sci(worst_idem) +
                       " (< 1e-9)");
}

CheckResult c02_topk_oracle() {
    const ChunkSpec spec{4096, 32};
    RngStream rng(202, 2);
    std::size_t mismatches = 0;
    std::size_t tie_chunks = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor<float> e({4096});
        const int mode = trial % 4;
        for (auto& v : e.data()) {
            const double g = rng.normal();
            switch (mode) {
                case 0: v = static_cast<float>(g); break;
                case 1: v = static_cast<float>(static_cast<int>(rng.below(5)) - 2); break;
                case 2: v = rng.below(2) ? 0.5f : -0.5f; break;
                default: v = static_cast<float>(g); break;
            }
        }
        if (mode == 3) {
            for (int j = 0; j < 40; ++j) {
                e[rng.below(4096)] = (j % 2 ? 9.0f : -9.0f);
            }
        }
        if (mode != 0) {
            ++tie_chunks;
        }
        const auto sd = topk_chunks(e, spec);

        std::vector<std::size_t> order(4096);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return std::abs(e[a]) > std::abs(e[b]); });
        order.resize(32);
        std::sort(order.begin(), order.end());
        bool ok = sd.indices.size() == 1 && sd.indices[0].size() == 32;
        for (std::size_t i = 0; ok && i < 32; ++i) {
            ok = sd.indices[0][i] == order[i] && sd.values[0][i] == e[order[i]];
        }
        mismatches += ok ? 0 : 1;
    }
    const double density = static_cast<double>(spec.kept(10 * 4096)) / (10.0 * 4096.0);
    const bool density_ok = density == 0.0078125;
    return verdict(mismatches == 0 && density_ok,
                   std::to_string(mismatches) + "/1000 chunks differ from the full-sort oracle (" +
                       std::to_string(tie_chunks) + " with ties); density = " + fix(density * 100.0, 5) + "%");
}

template <Real T>
std::size_t ef_conservation_failures(RngStream& rng, int trials) {
    std::size_t failures = 0;
    for (int t = 0; t < trials; ++t) {
        const std::size_t n = 1 + rng.below(20000);
        const ChunkSpec spec{std::size_t{1} << (6 + rng.below(7)), 1 + rng.below(40)};
        const ChunkSpec s{spec.chunk_len, std::min(spec.k_per_chunk, spec.chunk_len)};
        const T beta = static_cast<T>(0.99 * rng.uniform());
        ErrorAccumulator<T> acc{scale(gaussian<T>(rng, {n}), static_cast<T>(3.0 * rng.uniform())), beta};
        const auto e_prev = acc.e;
        const auto delta = gaussian<T>(rng, {n});
        ef_accumulate(acc, delta);
        const auto sd = quantize(topk_chunks(acc.e, s));
        ef_subtract(acc, sd);
        const auto dense = densify(sd);
        for (std::size_t i = 0; i < n; ++i) {
            const T want = beta * e_prev[i] + delta[i];
            if (dense[i] + acc.e[i] != want) {
                ++failures;
                break;
            }
        }
    }
    return failures;
}

CheckResult c03_error_feedback() {
    RngStream rng(303, 3);
    const auto f32 = ef_conservation_failures<float>(rng, 100);
    const auto f64 = ef_conservation_failures<double>(rng, 100);
    return verdict(f32 == 0 && f64 == 0, std::to_string(f32) + "/100 float and " + std::to_string(f64) +
                                             "/100 double triples violate densify(d) + e_next == beta e + delta");
}

struct TinySetup {
    ModelConfig cfg;
    ModelState<double> st;
    std::vector<std::int32_t> inputs, targets;
    std::size_t batch = 2;
};

TinySetup tiny_setup(std::uint64_t seed) {
    TinySetup s;
    s.cfg = tiny_model();
    RngStream rng(seed, 4);
    s.st = init_model<double>(s.cfg, rng);
    // Larger weights than the default init so every path carries signal.
    s.st.params.visit([&](const std::string&, Tensor<double>& t) {
        for (auto& v : t.data()) {
            v += 0.2 * rng.normal();
        }
    });
    s.st.buffers.t_perp = scale(gaussian<double>(rng, {s.cfg.vocab, s.cfg.d_model}), 0.3);
    s.inputs = random_tokens(rng, s.batch * s.cfg.seq_len, s.cfg.vocab);
    s.targets = random_tokens(rng, s.batch * s.cfg.seq_len, s.cfg.vocab);
    return s;
}

CheckResult c04_pipeline_equivalence() {
    auto s = tiny_setup(404);
    const std::vector<StageParams<double>> mono{s.st.params};
    const auto ref = chain_loss_and_grads(s.cfg, mono, s.st.buffers, s.inputs, s.targets, s.batch, s.cfg.seq_len);
    const auto ref_named = named(ref.grads[0]);
    double worst = 0.0;
    std::ostringstream os;
    for (std::size_t stages : {1, 2, 4}) {
        const auto parts = partition(s.st.params, stages);
        const auto res = chain_loss_and_grads(s.cfg, parts, s.st.buffers, s.inputs, s.targets, s.batch, s.cfg.seq_len);
        double w = std::abs(res.loss - ref.loss) / std::abs(ref.loss);
        const auto full = reassemble(res.grads);
        const auto got = named(full);
        if (got.size() != ref_named.size()) {
            return verdict(false, "S=" + std::to_string(stages) + " produced a different parameter list");
        }
        for (std::size_t i = 0; i < got.size(); ++i) {
            const double scale_ref = std::max(max_abs(*ref_named[i].second), 1e-300);
            w = std::max(w, max_abs_diff(*got[i].second, *ref_named[i].second) / scale_ref);
        }
        os << "S=" << stages << ": " << sci(w) << "  ";
        worst = std::max(worst, w);
    }
    return verdict(worst < 1e-10, "max relative diff vs monolithic " + os.str() + "(< 1e-10)");
}

CheckResult c05_gradients() {
    auto s = tiny_setup(505);
    const double eps = 1e-4;
    auto stages = std::vector<StageParams<double>>{s.st.params};
    const auto an = chain_loss_and_grads(s.cfg, stages, s.st.buffers, s.inputs, s.targets, s.batch, s.cfg.seq_len);
    auto an_named = named(an.grads[0]);

    std::vector<Tensor<double>*> params;
    stages[0].visit([&](const std::string&, Tensor<double>& t) { params.push_back(&t); });
    RngStream rng(505, 5);
    double worst = 0.0;
    std::string worst_name;
    std::size_t probes = 0;
    for (std::size_t ti = 0; ti < params.size(); ++ti) {
        auto& p = *params[ti];
        const auto& g = *an_named[ti].second;
        std::vector<std::size_t> idx;
        if (an_named[ti].first == "embed") {
            for (int j = 0; j < 6; ++j) {
                const auto row = static_cast<std::size_t>(s.inputs[rng.below(s.inputs.size())]);
                idx.push_back(row * s.cfg.d_model + rng.below(s.cfg.d_model));
            }
        } else {
            for (int j = 0; j < 6; ++j) {
                idx.push_back(rng.below(p.size()));
            }
        }
        std::size_t arg = 0;
        for (std::size_t i = 1; i < g.size(); ++i) {
            arg = std::abs(g[i]) > std::abs(g[arg]) ? i : arg;
        }
        idx.push_back(arg);
        double err = 0.0;
        for (auto i : idx) {
            const double orig = p[i];
            p[i] = orig + eps;
            const double lp = chain_loss(s.cfg, stages, s.st.buffers, s.inputs, s.targets, s.batch, s.cfg.seq_len);
            p[i] = orig - eps;
            const double lm = chain_loss(s.cfg, stages, s.st.buffers, s.inputs, s.targets, s.batch, s.cfg.seq_len);
            p[i] = orig;
            err = std::max(err, std::abs((lp - lm) / (2.0 * eps) - g[i]));
            ++probes;
        }
        const double rel = err / std::max(max_abs(g), 1e-8);
        if (rel > worst) {
            worst = rel;
            worst_name = an_named[ti].first;
        }
    }
    return verdict(worst < 1e-4, std::to_string(probes) + " central differences over " + std::to_string(params.size()) +
                                     " tensors; worst relative error " + sci(worst) + " (" + worst_name +
                                     ", < 1e-4)");
}

CheckResult c06_degenerate_sparseloco(const Options& opt) {
    const auto& corpus = desk_corpus(opt);
    auto c = small_cluster(1, 1);
    c.outer.beta = 0.0;
    c.outer.eta = 1.0;
    c.outer.h = 10;
    c.rounds = 10;
    c.outer.chunk = {4096, 4096};
    c.warmup = 10;
    const auto run = run_experiment<float>(c, corpus);

    // Plain AdamW on the same batches.
    RngStream init(c.model_seed, kModelInitStream);
    auto st = init_model<float>(c.model, init);
    ReplicaState<float> r;
    r.stages = {st.params};
    r.opt.cfg = c.adamw;
    r.opt.schedule = c.schedule();
    const auto shards = shard_data(corpus.train, 1, c.model.seq_len + 1);
    BatchSampler sampler(shards[0], c.batch, c.model.seq_len, c.data_seed, kSamplerStreamBase);
    for (std::size_t step = 0; step < c.total_inner_steps(); ++step) {
        inner_step(c.model, r, st.buffers, sampler.next());
    }
    const auto plain = named(r.stages[0]);
    const auto got = named(run.params);
    double worst = 0.0;
    for (std::size_t i = 0; i < plain.size(); ++i) {
        worst = std::max(worst, static_cast<double>(max_abs_diff(*plain[i].second, *got[i].second)));
    }
    return verdict(worst < 1e-6, "after " + std::to_string(c.total_inner_steps()) + " inner steps in " +
                                     std::to_string(c.rounds) + " rounds, max |theta_sparseloco - theta_adamw| = " +
                                     sci(worst) + " (< 1e-6)");
}

CheckResult c07_subspace_roundtrip() {
    RngStream rng(707, 7);
    const std::size_t d = 64, k = 8, b = 2, L = 8, vocab = 32;
    const auto basis = make_basis<float>(77, d, k);
    EmbeddingBuffers<float> emb{gaussian<float>(rng, {vocab, d}), scale(gaussian<float>(rng, {L, d}), 0.1f)};
    const auto ids = random_tokens(rng, b * L, vocab);

    // Residual inside Col(U).
    ActivationPacket<float> pkt;
    pkt.batch = b;
    pkt.seq = L;
    pkt.token_ids = ids;
    pkt.x = matmul_last_t(gaussian<float>(rng, {b, L, k}), basis.u);
    for (std::size_t r = 0; r < b * L; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            pkt.x.row(r)[j] += emb.t_perp(static_cast<std::size_t>(ids[r]), j) + emb.pos(r % L, j);
        }
    }
    const auto rt = reconstruct_activation(compress_activation(pkt, emb, basis), emb, basis);
    const double inside = max_abs_diff(rt.x, pkt.x);

    // Arbitrary activations: roundtrip loss equals out-of-subspace residual norm.
    double worst_rel = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        pkt.x = gaussian<float>(rng, {b, L, d});
        const auto back = reconstruct_activation(compress_activation(pkt, emb, basis), emb, basis);
        double lost = 0.0;
        Tensor<float> residual(pkt.x.shape());
        for (std::size_t r = 0; r < b * L; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = static_cast<double>(pkt.x.row(r)[j]) - static_cast<double>(back.x.row(r)[j]);
                lost += diff * diff;
                residual.row(r)[j] =
                    pkt.x.row(r)[j] - emb.t_perp(static_cast<std::size_t>(ids[r]), j) - emb.pos(r % L, j);
            }
        }
        lost = std::sqrt(lost);
        const double expected = out_of_subspace_norm(residual, basis.u);
        worst_rel = std::max(worst_rel, std::abs(lost - expected) / expected);
    }
    return verdict(inside < 1e-5 && worst_rel < 1e-4, "in-subspace roundtrip max abs error " + sci(inside) +
                                                         " (< 1e-5); roundtrip loss vs out-of-subspace norm, worst "
                                                         "relative gap " +
                                                         sci(worst_rel) + " (< 1e-4)");
}

CheckResult c08_embedding_split() {
    RngStream rng(808, 8);
    double worst_sum = 0.0;
    double worst_in = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t d = 64, k = 8, vocab = 256;
        const auto basis = make_basis<float>(800 + static_cast<std::uint64_t>(trial), d, k);
        const auto te = scale(gaussian<float>(rng, {vocab, d}), 0.5f);
        auto split = split_embedding(te, basis);
        worst_sum = std::max(worst_sum, static_cast<double>(max_abs_diff(add(split.t_s, split.t_perp), te)));
        worst_in = std::max(worst_in, static_cast<double>(max_abs_diff(split.t_s, project(split.t_s, basis))));
        // Simulate an update that leaves the subspace, then re-project.
        for (int round = 0; round < 5; ++round) {
            split.t_s = add(split.t_s, scale(gaussian<float>(rng, {vocab, d}), 0.1f));
            const auto before = add(split.t_s, split.t_perp);
            split = reproject_embedding(std::move(split), basis);
            worst_sum = std::max(worst_sum, static_cast<double>(max_abs_diff(add(split.t_s, split.t_perp), before)));
            worst_in = std::max(worst_in, static_cast<double>(max_abs_diff(split.t_s, project(split.t_s, basis))));
        }
    }
    return verdict(worst_sum < 1e-6 && worst_in < 1e-6, "max |T_S + T_perp - TE| = " + sci(worst_sum) +
                                                            ", max |T_S - P(T_S)| = " + sci(worst_in) + " (both < 1e-6)");
}

CheckResult c09_bias_identity() {
    RngStream rng(909, 9);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t d = 2 + rng.below(63);
        const std::size_t k = 1 + rng.below(d);
        const auto basis = make_basis<double>(900 + static_cast<std::uint64_t>(t), d, k);
        const double alpha = rng.uniform();
        const auto delta = gaussian<double>(rng, {1 + rng.below(8), d});
        // Independent evaluation of both forms.
        const auto p = project(delta, basis);
        double gap = 0.0;
        for (std::size_t i = 0; i < delta.size(); ++i) {
            const double lhs = alpha * delta[i] + (1.0 - alpha) * p[i];
            const double rhs = delta[i] - (1.0 - alpha) * (delta[i] - p[i]);
            gap = std::max(gap, std::abs(lhs - rhs));
        }
        const auto rep = bias_decompose(delta, basis, alpha);
        gap = std::max({gap, rep.identity_gap, max_abs_diff(rep.delta_het, sub(delta, scale(rep.bias, 1.0 - alpha)))});
        worst = std::max(worst, gap);
    }
    Tensor<double> e1({2, 1}, {1.0, 0.0});
    const auto hand = bias_decompose(Tensor<double>({1, 2}, {2.0, 4.0}), basis_from_matrix(e1), 0.5);
    const bool hand_ok = hand.delta_het[0] == 2.0 && hand.delta_het[1] == 2.0 && hand.delta_proj[0] == 2.0 &&
                         hand.delta_proj[1] == 0.0 && hand.bias[0] == 0.0 && hand.bias[1] == 4.0;
    return verdict(worst < 1e-10 && hand_ok, "worst gap between the two forms over 100 instances " + sci(worst) +
                                                 " (< 1e-10); hand case gives (" + fix(hand.delta_het[0], 1) + ", " +
                                                 fix(hand.delta_het[1], 1) + ")");
}

CheckResult c10_degenerate_alpha(const Options& opt) {
    const auto& corpus = desk_corpus(opt);
    const auto base = small_cluster(4, 2);
    auto csv = [&](const std::string& preset, double alpha) {
        const auto c = apply_preset(base, preset, 4, 2, 0.25, alpha);
        return io::metrics_csv(run_experiment<float>(c, corpus).report);
    };
    const auto baseline = csv("baseline", 1.0);
    const auto het1 = csv("het", 1.0);
    const auto uniform = csv("uniform", 1.0);
    const auto het0 = csv("het", 0.0);
    const bool distinct = baseline != uniform;
    return verdict(baseline == het1 && uniform == het0 && distinct,
                   std::string("het(1) vs baseline: ") + (baseline == het1 ? "identical" : "DIFFERENT") +
                       "; het(0) vs uniform: " + (uniform == het0 ? "identical" : "DIFFERENT") +
                       "; baseline vs uniform differ: " + (distinct ? "yes" : "no"));
}

CheckResult c11_perf_checkpoint() {
    using namespace perf;
    const auto s = reference_70b();
    const HardwareSpec hw;
    double min_u = 1.0;
    const auto grid = log_grid(1e8, 1e9, 64);
    for (double bw : grid) {
        min_u = std::min(min_u, utilization(s, hw, {bw, 0.0}));
    }
    // Monotonicity over a wide grid and a family of ratios.
    const std::vector<double> ratios{1.0, 0.5, 0.25, 0.125, 1.0 / 16, 1.0 / 32, 1.0 / 64};
    const auto wide = log_grid(1e6, 1e13, 200);
    const auto rows = sweep(s, hw, ratios, wide, 1000.0);
    bool mono_bw = true;
    bool mono_ratio = true;
    for (std::size_t r = 0; r < ratios.size(); ++r) {
        for (std::size_t i = 1; i < wide.size(); ++i) {
            mono_bw &= rows[r * wide.size() + i].utilization >= rows[r * wide.size() + i - 1].utilization;
        }
        if (r > 0) {
            for (std::size_t i = 0; i < wide.size(); ++i) {
                mono_ratio &= rows[r * wide.size() + i].utilization >= rows[(r - 1) * wide.size() + i].utilization;
            }
        }
    }
    double worst_consistency = 0.0;
    for (const auto& row : rows) {
        PerfScenario sc = s;
        sc.k_over_d = row.k_over_d;
        const double lhs = row.wallclock_s * row.utilization;
        const double rhs = 1000.0 * step_compute_time(sc, hw);
        worst_consistency = std::max(worst_consistency, std::abs(lhs - rhs) / rhs);
    }
    PerfScenario unc = s;
    unc.k_over_d = 1.0;
    const double u_unc = utilization(unc, hw, {1e8, 0.0});
    const double u_c = utilization(s, hw, {1e8, 0.0});
    const bool ok = min_u >= 0.97 && mono_bw && mono_ratio && worst_consistency < 1e-12 && u_unc < u_c;
    return verdict(ok, "min utilization over [100 Mb/s, 1 Gb/s] at k/d=1/8: " + fix(min_u) +
                           " (>= 0.97); monotone in bandwidth: " + (mono_bw ? "yes" : "no") +
                           "; monotone in compression: " + (mono_ratio ? "yes" : "no") +
                           "; wallclock*u vs steps*T_c: " + sci(worst_consistency) + "; uncompressed at 100 Mb/s " +
                           fix(u_unc) + " < " + fix(u_c));
}

CheckResult c12_byte_meters(const Options& opt) {
    const auto& corpus = desk_corpus(opt);
    struct Desk {
        std::size_t b, L, d, layers, stages, h;
        double k_over_d;
        const char* preset;
    };
    const std::vector<Desk> desks{{2, 8, 16, 2, 2, 3, 0.25, "uniform"},
                                  {1, 16, 32, 4, 4, 2, 0.125, "het_half"},
                                  {3, 4, 16, 2, 2, 4, 0.5, "het_half"}};
    std::ostringstream os;
    bool ok = true;
    for (const auto& dk : desks) {
        auto c = small_cluster(4, dk.stages);
        c.model.d_model = dk.d;
        c.model.n_layers = dk.layers;
        c.model.seq_len = dk.L;
        c.batch = dk.b;
        c.outer.h = dk.h;
        c.rounds = 1;
        c = apply_preset(c, dk.preset, 4, dk.stages, dk.k_over_d);
        const auto run = run_experiment<float>(c, corpus);
        const auto& rec = run.report.rounds.at(1);

        double expect_pp = 0.0;
        for (const auto& r : c.replicas) {
            perf::PerfScenario s;
            s.d_model = dk.d;
            s.seq_len = dk.L;
            s.micro_batch = dk.b;
            s.microbatches = 1;
            s.stages = r.stages;
            s.k_over_d = r.pp_compressed ? r.k_over_d : 1.0;
            s.h = dk.h;
            s.header_bytes = static_cast<double>(kPacketHeaderBytes);
            s.id_bytes_per_token = 4.0;
            s.act_bytes_per_elem = 4.0;
            expect_pp += static_cast<double>(dk.h) * perf::pp_bytes_per_step(s);
        }
        std::uint64_t expect_dp = 0;
        run.params.visit([&](const std::string&, const Tensor<float>& t) {
            expect_dp += 2 * sparse_wire_bytes(c.outer.chunk.num_chunks(t.size()), c.outer.chunk.kept(t.size()));
        });
        expect_dp *= c.replicas.size();
        const bool pp_ok = static_cast<double>(rec.pp_bytes) == expect_pp;
        const bool dp_ok = rec.dp_bytes == expect_dp;
        ok &= pp_ok && dp_ok;
        os << "(b=" << dk.b << ",L=" << dk.L << ",k=" << llround(dk.k_over_d * static_cast<double>(dk.d))
           << ",S=" << dk.stages << ",H=" << dk.h << ") pp " << rec.pp_bytes << (pp_ok ? " == " : " != ")
           << static_cast<std::uint64_t>(expect_pp) << ", dp " << rec.dp_bytes << (dp_ok ? " == " : " != ")
           << expect_dp << "; ";
    }
    return verdict(ok, os.str());
}

ClusterConfig desk_cluster(std::uint64_t seed) {
    ClusterConfig c;
    c.model.d_model = 64;
    c.model.n_layers = 2;
    c.model.n_heads = 4;
    c.model.vocab = 256;
    c.model.seq_len = 32;
    c.outer.h = 10;
    c.outer.replicas = 4;
    c.rounds = 60;
    c.batch = 4;
    c.eval_batches = 4;
    c.lr = 3e-3;
    c.warmup = 30;
    c.model_seed = seed;
    c.data_seed = seed + 100;
    c.basis_seed = seed + 200;
    return c;
}

CheckResult c13_training_trends(const Options& opt) {
    const auto& corpus = desk_corpus(opt);
    struct Variant {
        std::string label, preset;
        double ratio;
    };
    const std::vector<Variant> variants{{"baseline", "baseline", 1.0},
                                        {"het_half@1/8", "het_half", 0.125},
                                        {"uniform@1/8", "uniform", 0.125},
                                        {"het_half@1/32", "het_half", 1.0 / 32},
                                        {"uniform@1/32", "uniform", 1.0 / 32}};
    std::map<std::string, std::vector<double>> finals;
    bool gate_a = true;
    std::ostringstream os;
    for (std::uint64_t seed : {11, 12, 13}) {
        for (const auto& v : variants) {
            const auto c = apply_preset(desk_cluster(seed), v.preset, 4, 2, v.ratio);
            const auto run = run_experiment<float>(c, corpus);
            const double init = run.report.initial_eval_loss;
            const double fin = run.report.final_eval_loss;
            finals[v.label].push_back(fin);
            const bool a = fin < 0.8 * init;
            gate_a &= a;
            if (opt.log) {
                *opt.log << "    seed " << seed << " " << std::setw(14) << std::left << v.label << std::right
                         << " initial " << fix(init) << " final " << fix(fin) << (a ? "" : "  (above 0.8x initial)")
                         << "  [" << fix(run.report.rounds.back().elapsed_s, 1) << " s]\n";
                opt.log->flush();
            }
        }
    }
    auto mean = [&](const std::string& l) {
        const auto& xs = finals[l];
        return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    };
    const double base = mean("baseline");
    bool gate_b = true;
    for (std::size_t i = 0; i < 3; ++i) {
        const double rel = (finals["uniform@1/8"][i] - finals["baseline"][i]) / finals["baseline"][i];
        gate_b &= rel <= 0.15;
    }
    os << "(a) all finals < 0.8x initial: " << (gate_a ? "yes" : "no") << "; (b) uniform@1/8 within 15% of baseline: "
       << (gate_b ? "yes" : "no") << " (seed-mean gap " << fix(100.0 * (mean("uniform@1/8") - base) / base, 2)
       << "%); (c) seed means:";
    for (const auto& v : variants) {
        os << " " << v.label << "=" << fix(mean(v.label));
    }
    const bool order8 = base <= mean("het_half@1/8") && mean("het_half@1/8") <= mean("uniform@1/8");
    const bool order32 = base <= mean("het_half@1/32") && mean("het_half@1/32") <= mean("uniform@1/32");
    const double gap8 = mean("uniform@1/8") - base;
    const double gap32 = mean("uniform@1/32") - base;
    os << "; ordering baseline<=het<=uniform at 1/8: " << (order8 ? "yes" : "no") << ", at 1/32: "
       << (order32 ? "yes" : "no") << "; uniform gap grows with compression: " << (gap32 >= gap8 ? "yes" : "no")
       << " (" << fix(gap8) << " -> " << fix(gap32) << ")";
    return verdict(gate_a && gate_b, os.str());
}

// ---------------------------------------------------------------------------
// Golden files

struct Golden {
    const char* file;
    std::function<wire::Bytes()> make;
};

std::vector<Golden> goldens() {
    return {
        {"rng_normal.bin",
         [] {
             RngStream rng(42, 7);
             return serialize(gaussian<double>(rng, {64}));
         }},
        {"basis_16x4.bin", [] { return serialize(make_basis<double>(5, 16, 4).u); }},
        {"topk_wire.bin",
         [] {
             RngStream rng(43, 1);
             return encode_sparse(topk_chunks(gaussian<float>(rng, {5000}), ChunkSpec{1024, 8}));
         }},
        {"packet_wire.bin",
         [] {
             RngStream rng(44, 1);
             const auto basis = make_basis<float>(9, 16, 4);
             EmbeddingBuffers<float> emb{gaussian<float>(rng, {8, 16}), gaussian<float>(rng, {4, 16})};
             ActivationPacket<float> pkt;
             pkt.batch = 2;
             pkt.seq = 4;
             pkt.token_ids = random_tokens(rng, 8, 8);
             pkt.x = gaussian<float>(rng, {2, 4, 16});
             return encode_packet(compress_activation(pkt, emb, basis));
         }},
    };
}

CheckResult check_golden(const Options& opt, const Golden& g) {
    const auto path = std::filesystem::path(opt.golden_dir) / g.file;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        return verdict(false, "golden file " + path.string() + " is missing");
    }
    const wire::Bytes stored((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto now = g.make();
    if (stored.size() != now.size()) {
        return verdict(false, std::string(g.file) + ": size " + std::to_string(stored.size()) + ", expected " +
                                  std::to_string(now.size()));
    }
    for (std::size_t i = 0; i < now.size(); ++i) {
        if (stored[i] != now[i]) {
            return verdict(false, std::string(g.file) + ": first difference at byte " + std::to_string(i));
        }
    }
    return verdict(true, std::string(g.file) + ": " + std::to_string(now.size()) + " bytes match");
}

// ---------------------------------------------------------------------------
// Supplementary invariants

CheckResult s_wallclock_512m() {
    using namespace perf;
    const auto base = reference_512m();
    const HardwareSpec hw;
    const LinkSpec link{1e9, 0.0};
    PerfScenario unc = base;
    unc.k_over_d = 1.0;
    const double tc = wallclock(base, hw, link, 12e9 / base.tokens_per_step());
    const double tu = wallclock(unc, hw, link, 10e9 / unc.tokens_per_step());
    return verdict(tc < tu, "512M at 1 Gb/s: compressed 12B tokens " + sci(tc) + " s vs uncompressed 10B tokens " +
                                sci(tu) + " s");
}

CheckResult s_error_feedback_bound() {
    RngStream rng(31, 1);
    const double c = 0.7;
    const float beta = 0.9f;
    ErrorAccumulator<float> acc{Tensor<float>({3000}), beta};
    double worst = 0.0;
    for (int t = 0; t < 300; ++t) {
        Tensor<float> d({3000});
        for (auto& v : d.data()) {
            v = static_cast<float>(c * (2.0 * rng.uniform() - 1.0));
        }
        ef_accumulate(acc, d);
        ef_subtract(acc, quantize(topk_chunks(acc.e, ChunkSpec{1000, 4})));
        worst = std::max(worst, static_cast<double>(max_abs(acc.e)));
    }
    const double bound = c / (1.0 - static_cast<double>(beta));
    return verdict(worst <= bound * (1.0 + 1e-6), "max |e| " + fix(worst) + " <= c/(1-beta) = " + fix(bound));
}

CheckResult s_subspace_containment() {
    ModelConfig m;
    m.d_model = 32;
    m.n_layers = 4;
    m.n_heads = 4;
    m.vocab = 64;
    m.seq_len = 16;
    RngStream rng(55, 1);
    auto st = init_model<float>(m, rng);
    const auto basis = make_basis<float>(56, m.d_model, 4);
    auto split = split_embedding(st.params.embed, basis);
    st.params.embed = split.t_s;
    st.buffers.t_perp = split.t_perp;
    auto stages = partition(st.params, 2);
    for (auto& s : stages) {
        s = project_weights(std::move(s), basis);
    }
    ActivationPacket<float> pkt;
    pkt.batch = 2;
    pkt.seq = m.seq_len;
    pkt.token_ids = random_tokens(rng, 2 * m.seq_len, m.vocab);
    const auto out = forward_stage(m, stages[0], st.buffers, pkt, 0).out;
    Tensor<float> residual = out.x;
    for (std::size_t r = 0; r < residual.rows(); ++r) {
        for (std::size_t j = 0; j < m.d_model; ++j) {
            residual.row(r)[j] -=
                st.buffers.t_perp(static_cast<std::size_t>(pkt.token_ids[r]), j) + st.buffers.pos(r % m.seq_len, j);
        }
    }
    const double ratio = out_of_subspace_norm(residual, basis.u) / frobenius(residual);
    return verdict(ratio < 1e-3, "out-of-subspace fraction of the inter-stage residual " + sci(ratio) + " (< 1e-3)");
}

CheckResult s_thread_determinism(const Options& opt) {
    const auto& corpus = desk_corpus(opt);
    auto c = apply_preset(small_cluster(4, 2), "het_half", 4, 2, 0.25);
    const auto one = io::metrics_csv(run_experiment<float>(c, corpus).report);
    c.threads = 3;
    const auto three = io::metrics_csv(run_experiment<float>(c, corpus).report);
    const auto again = io::metrics_csv(run_experiment<float>(c, corpus).report);
    return verdict(one == three && three == again,
                   std::string("metrics identical across reruns and thread counts: ") +
                       (one == three && three == again ? "yes" : "no"));
}

CheckResult s_ddp_preset(const Options& opt) {
    const auto& corpus = desk_corpus(opt);
    auto c = apply_preset(small_cluster(2, 2), "ddp", 2, 2, 0.25, 1.0);
    c.rounds = 4;
    const auto run = run_experiment<float>(c, corpus);
    const bool ok = std::isfinite(run.report.final_eval_loss) &&
                    run.report.final_eval_loss < run.report.initial_eval_loss;
    return verdict(ok, "ddp eval loss " + fix(run.report.initial_eval_loss) + " -> " +
                           fix(run.report.final_eval_loss));
}

}  // namespace

Options default_options() {
    Options o;
    o.golden_dir = std::string(HETLOCO_SOURCE_DIR) + "/tests/golden";
    o.corpus_path = std::string(HETLOCO_SOURCE_DIR) + "/data/corpus.txt";
    return o;
}

std::vector<Check> all_checks(const Options& opt) {
    std::vector<Check> v{
        {"orthonormality", 1, c01_orthonormality},
        {"topk_oracle", 2, c02_topk_oracle},
        {"error_feedback_conservation", 3, c03_error_feedback},
        {"pipeline_equivalence", 4, c04_pipeline_equivalence},
        {"gradient_check", 5, c05_gradients},
        {"sparseloco_degenerate", 6, [opt] { return c06_degenerate_sparseloco(opt); }},
        {"subspace_roundtrip", 7, c07_subspace_roundtrip},
        {"embedding_split", 8, c08_embedding_split},
        {"bias_identity", 9, c09_bias_identity},
        {"degenerate_alpha", 10, [opt] { return c10_degenerate_alpha(opt); }},
        {"perf_checkpoint", 11, c11_perf_checkpoint},
        {"byte_meters", 12, [opt] { return c12_byte_meters(opt); }},
        {"training_trends", 13, [opt] { return c13_training_trends(opt); }},
    };
    for (const auto& g : goldens()) {
        v.push_back({std::string("golden_") + g.file, 0, [opt, g] { return check_golden(opt, g); }});
    }
    v.push_back({"wallclock_512m", 0, s_wallclock_512m});
    v.push_back({"error_feedback_bound", 0, s_error_feedback_bound});
    v.push_back({"subspace_containment", 0, s_subspace_containment});
    v.push_back({"thread_determinism", 0, [opt] { return s_thread_determinism(opt); }});
    v.push_back({"ddp_preset", 0, [opt] { return s_ddp_preset(opt); }});
    return v;
}

int run_checks(const std::vector<Check>& checks, const std::string& filter, std::ostream& out) {
    int failures = 0;
    int ran = 0;
    for (const auto& c : checks) {
        if (!filter.empty() && c.name.find(filter) == std::string::npos) {
            continue;
        }
        ++ran;
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = {false, std::string("threw: ") + e.what()};
        }
        const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += r.passed ? 0 : 1;
        out << (r.passed ? "PASS " : "FAIL ");
        if (c.criterion > 0) {
            out << "criterion " << std::setw(2) << c.criterion << " ";
        } else {
            out << "check        ";
        }
        out << std::left << std::setw(30) << c.name << std::right << " [" << fix(dt, 2) << " s] " << r.detail << "\n";
        out.flush();
    }
    if (ran == 0) {
        out << "FAIL no check matches filter '" << filter << "'\n";
        return 1;
    }
    out << (failures == 0 ? "all " : "") << ran - failures << "/" << ran << " checks passed\n";
    return failures;
}

void write_goldens(const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& g : goldens()) {
        io::atomic_write(std::filesystem::path(dir) / g.file, g.make());
    }
}

}  // namespace hetloco::verify
