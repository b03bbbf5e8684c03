// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hetloco/error.hpp"
#include "hetloco/linalg.hpp"
#include "hetloco/rng.hpp"
#include "hetloco/tensor.hpp"

namespace hetloco {

/// Decoder-only transformer shape: pre-RMSNorm blocks with causal multi-head attention and a
/// SwiGLU feed-forward, learned absolute positions, untied LM head.
struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    double ffn_mult = 8.0 / 3.0;
    std::size_t vocab = 256;
    std::size_t seq_len = 64;
    int precision_bits = 32;

    std::size_t ffn_hidden() const {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ffn_mult * static_cast<double>(d_model))));
    }
    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (d_model == 0 || n_heads == 0 || vocab == 0 || seq_len == 0) {
            throw ConfigError("model extents must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                                  std::to_string(n_heads) + ")",
                              "model.n_heads");
        }
        if (!(ffn_mult > 0.0)) {
            throw ConfigError("ffn_mult must be positive", "model.ffn_mult");
        }
        if (precision_bits != 32 && precision_bits != 64) {
            throw ConfigError("precision must be 32 or 64", "model.precision");
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kRmsEps = 1e-5;

template <Real T>
struct LayerParams {
    Tensor<T> attn_norm;  // [d]
    Tensor<T> wq, wk, wv; // [d x d]
    Tensor<T> wo;         // [d x d]  attention output projection (writes the residual stream)
    Tensor<T> ffn_norm;   // [d]
    Tensor<T> w_gate;     // [d x f]
    Tensor<T> w_up;       // [d x f]
    Tensor<T> w_down;     // [f x d]  FFN down projection (writes the residual stream)

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + "attn_norm", attn_norm);
        f(prefix + "wq", wq);
        f(prefix + "wk", wk);
        f(prefix + "wv", wv);
        f(prefix + "wo", wo);
        f(prefix + "ffn_norm", ffn_norm);
        f(prefix + "w_gate", w_gate);
        f(prefix + "w_up", w_up);
        f(prefix + "w_down", w_down);
    }
    template <typename F>
    void visit(const std::string& prefix, F&& f) const {
        const_cast<LayerParams*>(this)->visit(prefix, [&](const std::string& n, Tensor<T>& t) {
            f(n, static_cast<const Tensor<T>&>(t));
        });
    }

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Parameters of a contiguous layer range. The first stage also owns the learnable embedding
/// table; the last stage owns the final norm and LM head. A stage that is both holds the whole model.
template <Real T>
struct StageParams {
    std::size_t first_layer = 0;
    bool is_first = false;
    bool is_last = false;
    Tensor<T> embed;       // [vocab x d]  learnable embedding component
    std::vector<LayerParams<T>> layers;
    Tensor<T> final_norm;  // [d]
    Tensor<T> head;        // [d x vocab]

    std::size_t layer_end() const { return first_layer + layers.size(); }

    /// Calls f(name, tensor) for every trainable tensor in canonical order.
    template <typename F>
    void visit(F&& f) {
        if (is_first) {
            f(std::string("embed"), embed);
        }
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i].visit("layers." + std::to_string(first_layer + i) + ".", f);
        }
        if (is_last) {
            f(std::string("final_norm"), final_norm);
            f(std::string("head"), head);
        }
    }
    template <typename F>
    void visit(F&& f) const {
        const_cast<StageParams*>(this)->visit([&](const std::string& n, Tensor<T>& t) {
            f(n, static_cast<const Tensor<T>&>(t));
        });
    }

    StageParams zeros_like() const {
        StageParams z = *this;
        z.visit([](const std::string&, Tensor<T>& t) { t.fill(T{0}); });
        return z;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
        return n;
    }

    friend bool operator==(const StageParams&, const StageParams&) = default;
};

/// Full parameter set: a single stage spanning all layers.
template <Real T>
using ModelParams = StageParams<T>;

/// Non-trainable embedding state replicated read-only on every stage.
template <Real T>
struct EmbeddingBuffers {
    Tensor<T> t_perp;  // [vocab x d]  fixed high-rank embedding component
    Tensor<T> pos;     // [seq_len x d] positional table

    friend bool operator==(const EmbeddingBuffers&, const EmbeddingBuffers&) = default;
};

template <Real T>
struct ModelState {
    ModelParams<T> params;
    EmbeddingBuffers<T> buffers;
};

/// Tensor flowing between stages: hidden states (width d or k) plus the token ids they belong to.
template <Real T>
struct ActivationPacket {
    Tensor<T> x;  // [b x L x width]; empty for the input of a first stage
    std::vector<std::int32_t> token_ids;  // b*L, row-major
    std::size_t batch = 0;
    std::size_t seq = 0;
    bool compressed = false;
};

/// Visits every trainable tensor of a partitioned parameter set in canonical order.
template <Real T, typename F>
void for_each_param(std::vector<StageParams<T>>& stages, F&& f) {
    for (auto& s : stages) {
        s.visit(f);
    }
}
template <Real T, typename F>
void for_each_param(const std::vector<StageParams<T>>& stages, F&& f) {
    for (const auto& s : stages) {
        s.visit(f);
    }
}

/// Closed-form trainable parameter count.
inline std::size_t expected_param_count(const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model;
    const std::size_t f = cfg.ffn_hidden();
    const std::size_t per_layer = 2 * d + 4 * d * d + 3 * d * f;
    return cfg.vocab * d + cfg.n_layers * per_layer + d + d * cfg.vocab;
}

// ---------------------------------------------------------------------------
// Initialization and partitioning

inline constexpr double kInitStd = 0.02;

/// Deterministic initialization. The whole token embedding starts in the learnable table
/// (t_perp is zero) and positions are a fixed N(0, 0.02) table.
template <Real T>
ModelState<T> init_model(const ModelConfig& cfg, RngStream& rng) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    const std::size_t f = cfg.ffn_hidden();
    const double out_std = kInitStd / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.n_layers, 1)));
    auto normal = [&](Shape s, double std) { return scale(gaussian<T>(rng, std::move(s)), static_cast<T>(std)); };

    ModelState<T> st;
    auto& p = st.params;
    p.first_layer = 0;
    p.is_first = true;
    p.is_last = true;
    p.embed = normal({cfg.vocab, d}, kInitStd);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerParams<T> lp;
        lp.attn_norm = Tensor<T>::full({d}, T{1});
        lp.wq = normal({d, d}, kInitStd);
        lp.wk = normal({d, d}, kInitStd);
        lp.wv = normal({d, d}, kInitStd);
        lp.wo = normal({d, d}, out_std);
        lp.ffn_norm = Tensor<T>::full({d}, T{1});
        lp.w_gate = normal({d, f}, kInitStd);
        lp.w_up = normal({d, f}, kInitStd);
        lp.w_down = normal({f, d}, out_std);
        p.layers.push_back(std::move(lp));
    }
    p.final_norm = Tensor<T>::full({d}, T{1});
    p.head = normal({d, cfg.vocab}, kInitStd);
    st.buffers.t_perp = Tensor<T>({cfg.vocab, d});
    st.buffers.pos = normal({cfg.seq_len, d}, kInitStd);
    return st;
}

/// Splits a full parameter set into stages holding `layer_counts[s]` consecutive layers each.
template <Real T>
std::vector<StageParams<T>> partition(const ModelParams<T>& full, std::span<const std::size_t> layer_counts) {
    if (!full.is_first || !full.is_last || full.first_layer != 0) {
        throw PartitionError("partition expects a complete parameter set");
    }
    if (layer_counts.empty()) {
        throw PartitionError("partition needs at least one stage");
    }
    std::size_t total = 0;
    for (auto c : layer_counts) {
        total += c;
    }
    if (total != full.layers.size()) {
        throw PartitionError("stage layer counts sum to " + std::to_string(total) + ", model has " +
                             std::to_string(full.layers.size()) + " layers");
    }
    std::vector<StageParams<T>> stages(layer_counts.size());
    std::size_t next = 0;
    for (std::size_t s = 0; s < stages.size(); ++s) {
        auto& st = stages[s];
        st.first_layer = next;
        st.is_first = s == 0;
        st.is_last = s + 1 == stages.size();
        st.layers.assign(full.layers.begin() + static_cast<std::ptrdiff_t>(next),
                         full.layers.begin() + static_cast<std::ptrdiff_t>(next + layer_counts[s]));
        next += layer_counts[s];
        if (st.is_first) {
            st.embed = full.embed;
        }
        if (st.is_last) {
            st.final_norm = full.final_norm;
            st.head = full.head;
        }
    }
    return stages;
}

/// Equal split into `num_stages` stages; the layer count must be divisible by it.
template <Real T>
std::vector<StageParams<T>> partition(const ModelParams<T>& full, std::size_t num_stages) {
    if (num_stages == 0 || full.layers.size() % num_stages != 0) {
        throw PartitionError(std::to_string(full.layers.size()) + " layers cannot be split into " +
                             std::to_string(num_stages) + " equal stages");
    }
    std::vector<std::size_t> counts(num_stages, full.layers.size() / num_stages);
    return partition(full, std::span<const std::size_t>(counts));
}

template <Real T>
ModelParams<T> reassemble(const std::vector<StageParams<T>>& stages) {
    if (stages.empty() || !stages.front().is_first || !stages.back().is_last) {
        throw PartitionError("reassemble needs a first and a last stage");
    }
    ModelParams<T> full;
    full.is_first = true;
    full.is_last = true;
    full.embed = stages.front().embed;
    full.final_norm = stages.back().final_norm;
    full.head = stages.back().head;
    for (const auto& s : stages) {
        if (s.first_layer != full.layers.size()) {
            throw PartitionError("stages are not contiguous at layer " + std::to_string(s.first_layer));
        }
        full.layers.insert(full.layers.end(), s.layers.begin(), s.layers.end());
    }
    return full;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

template <Real T>
void rmsnorm_forward(const Tensor<T>& x, const Tensor<T>& gain, Tensor<T>& y, std::vector<T>& inv_rms) {
    const std::size_t rows = x.rows();
    const std::size_t d = x.cols();
    y = Tensor<T>(x.shape());
    inv_rms.assign(rows, T{0});
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xi = x.data().data() + i * d;
        T ss{0};
        for (std::size_t j = 0; j < d; ++j) {
            ss += xi[j] * xi[j];
        }
        const T r = T{1} / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(kRmsEps));
        inv_rms[i] = r;
        T* yi = y.data().data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            yi[j] = xi[j] * r * gain[j];
        }
    }
}

/// Accumulates into dx and dgain.
template <Real T>
void rmsnorm_backward(const Tensor<T>& x, const Tensor<T>& gain, const std::vector<T>& inv_rms, const Tensor<T>& dy,
                      Tensor<T>& dx, Tensor<T>& dgain) {
    const std::size_t rows = x.rows();
    const std::size_t d = x.cols();
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xi = x.data().data() + i * d;
        const T* dyi = dy.data().data() + i * d;
        T* dxi = dx.data().data() + i * d;
        const T r = inv_rms[i];
        T dot{0};
        for (std::size_t j = 0; j < d; ++j) {
            dot += dyi[j] * gain[j] * xi[j];
        }
        const T coeff = r * r * r * dot / static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) {
            dgain[j] += dyi[j] * xi[j] * r;
            dxi[j] += r * gain[j] * dyi[j] - coeff * xi[j];
        }
    }
}

template <Real T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
    return matmul_last(x, w);
}

/// dW += x^T dy, dx (+)= dy W^T
template <Real T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& dx,
                     bool accumulate_dx) {
    kernels::gemm_tn<T>(x.data(), dy.data(), dw.data(), x.rows(), x.cols(), dy.cols(), true);
    if (!accumulate_dx) {
        dx = Tensor<T>(x.shape());
    }
    kernels::gemm_nt<T>(dy.data(), w.data(), dx.data(), dy.rows(), dy.cols(), w.extent(0), true);
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace detail

template <Real T>
struct LayerTape {
    Tensor<T> x_in;
    std::vector<T> inv_rms1;
    Tensor<T> n1;
    Tensor<T> q, k, v;
    std::vector<T> probs;  // [b][h][L][L]
    Tensor<T> attn;        // concatenated head outputs, before wo
    Tensor<T> h;
    std::vector<T> inv_rms2;
    Tensor<T> n2;
    Tensor<T> gate, up, act;
};

template <Real T>
struct StageTape {
    std::vector<std::int32_t> token_ids;
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<LayerTape<T>> layers;
    Tensor<T> x_final;
    std::vector<T> inv_rms_final;
    Tensor<T> n_final;
};

template <Real T>
struct StageForward {
    ActivationPacket<T> out;  // hidden states, or logits [b x L x vocab] from a last stage
    StageTape<T> tape;
};

template <Real T>
struct StageBackward {
    Tensor<T> grad_out;     // d loss / d stage input; empty for a first stage
    StageParams<T> grads;   // same layout as the stage's parameters
};

namespace detail {

template <Real T>
Tensor<T> layer_forward(const ModelConfig& cfg, const LayerParams<T>& p, const Tensor<T>& x, std::size_t batch,
                        std::size_t seq, LayerTape<T>& tape) {
    const std::size_t d = cfg.d_model;
    const std::size_t nh = cfg.n_heads;
    const std::size_t hd = cfg.head_dim();
    const T scale_qk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

    tape.x_in = x;
    rmsnorm_forward(x, p.attn_norm, tape.n1, tape.inv_rms1);
    tape.q = linear(tape.n1, p.wq);
    tape.k = linear(tape.n1, p.wk);
    tape.v = linear(tape.n1, p.wv);
    tape.attn = Tensor<T>(x.shape());
    tape.probs.assign(batch * nh * seq * seq, T{0});

    std::vector<T> scores(seq);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < nh; ++h) {
            T* P = tape.probs.data() + ((b * nh + h) * seq) * seq;
            for (std::size_t t = 0; t < seq; ++t) {
                const T* qt = tape.q.data().data() + (b * seq + t) * d + h * hd;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t u = 0; u <= t; ++u) {
                    const T* ku = tape.k.data().data() + (b * seq + u) * d + h * hd;
                    T s{0};
                    for (std::size_t c = 0; c < hd; ++c) {
                        s += qt[c] * ku[c];
                    }
                    scores[u] = s * scale_qk;
                    mx = std::max(mx, scores[u]);
                }
                T z{0};
                for (std::size_t u = 0; u <= t; ++u) {
                    scores[u] = std::exp(scores[u] - mx);
                    z += scores[u];
                }
                T* out = tape.attn.data().data() + (b * seq + t) * d + h * hd;
                for (std::size_t u = 0; u <= t; ++u) {
                    const T pu = scores[u] / z;
                    P[t * seq + u] = pu;
                    const T* vu = tape.v.data().data() + (b * seq + u) * d + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) {
                        out[c] += pu * vu[c];
                    }
                }
            }
        }
    }

    tape.h = add(x, linear(tape.attn, p.wo));
    rmsnorm_forward(tape.h, p.ffn_norm, tape.n2, tape.inv_rms2);
    tape.gate = linear(tape.n2, p.w_gate);
    tape.up = linear(tape.n2, p.w_up);
    tape.act = Tensor<T>(tape.gate.shape());
    for (std::size_t i = 0; i < tape.act.size(); ++i) {
        const T g = tape.gate[i];
        const T silu = static_cast<T>(static_cast<double>(g) * sigmoid(static_cast<double>(g)));
        tape.act[i] = silu * tape.up[i];
    }
    return add(tape.h, linear(tape.act, p.w_down));
}

template <Real T>
Tensor<T> layer_backward(const ModelConfig& cfg, const LayerParams<T>& p, const LayerTape<T>& tape,
                         const Tensor<T>& dout, std::size_t batch, std::size_t seq, LayerParams<T>& g) {
    const std::size_t d = cfg.d_model;
    const std::size_t nh = cfg.n_heads;
    const std::size_t hd = cfg.head_dim();
    const T scale_qk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

    // FFN branch: out = h + act * w_down
    Tensor<T> dact;
    linear_backward(tape.act, p.w_down, dout, g.w_down, dact, false);
    Tensor<T> dgate(tape.gate.shape());
    Tensor<T> dup(tape.up.shape());
    for (std::size_t i = 0; i < dact.size(); ++i) {
        const double gv = static_cast<double>(tape.gate[i]);
        const double sg = sigmoid(gv);
        const T silu = static_cast<T>(gv * sg);
        const T dsilu = static_cast<T>(sg * (1.0 + gv * (1.0 - sg)));
        dgate[i] = dact[i] * tape.up[i] * dsilu;
        dup[i] = dact[i] * silu;
    }
    Tensor<T> dn2;
    linear_backward(tape.n2, p.w_gate, dgate, g.w_gate, dn2, false);
    linear_backward(tape.n2, p.w_up, dup, g.w_up, dn2, true);
    Tensor<T> dh = dout;
    rmsnorm_backward(tape.h, p.ffn_norm, tape.inv_rms2, dn2, dh, g.ffn_norm);

    // Attention branch: h = x + attn * wo
    Tensor<T> dattn;
    linear_backward(tape.attn, p.wo, dh, g.wo, dattn, false);
    Tensor<T> dq(tape.q.shape());
    Tensor<T> dk(tape.k.shape());
    Tensor<T> dv(tape.v.shape());
    std::vector<T> dp(seq);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < nh; ++h) {
            const T* P = tape.probs.data() + ((b * nh + h) * seq) * seq;
            for (std::size_t t = 0; t < seq; ++t) {
                const T* dot = dattn.data().data() + (b * seq + t) * d + h * hd;
                T rowdot{0};
                for (std::size_t u = 0; u <= t; ++u) {
                    const T* vu = tape.v.data().data() + (b * seq + u) * d + h * hd;
                    T s{0};
                    for (std::size_t c = 0; c < hd; ++c) {
                        s += dot[c] * vu[c];
                    }
                    dp[u] = s;
                    rowdot += P[t * seq + u] * s;
                }
                const T* qt = tape.q.data().data() + (b * seq + t) * d + h * hd;
                T* dqt = dq.data().data() + (b * seq + t) * d + h * hd;
                for (std::size_t u = 0; u <= t; ++u) {
                    const T pu = P[t * seq + u];
                    const T ds = pu * (dp[u] - rowdot) * scale_qk;
                    const T* ku = tape.k.data().data() + (b * seq + u) * d + h * hd;
                    T* dku = dk.data().data() + (b * seq + u) * d + h * hd;
                    T* dvu = dv.data().data() + (b * seq + u) * d + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) {
                        dqt[c] += ds * ku[c];
                        dku[c] += ds * qt[c];
                        dvu[c] += pu * dot[c];
                    }
                }
            }
        }
    }
    Tensor<T> dn1;
    linear_backward(tape.n1, p.wq, dq, g.wq, dn1, false);
    linear_backward(tape.n1, p.wk, dk, g.wk, dn1, true);
    linear_backward(tape.n1, p.wv, dv, g.wv, dn1, true);
    Tensor<T> dx = dh;
    rmsnorm_backward(tape.x_in, p.attn_norm, tape.inv_rms1, dn1, dx, g.attn_norm);
    return dx;
}

}  // namespace detail

/// Runs one stage. A first stage embeds `in.token_ids`; other stages consume `in.x`, which must be
/// uncompressed with width d_model. A last stage returns logits.
template <Real T>
StageForward<T> forward_stage(const ModelConfig& cfg, const StageParams<T>& stage, const EmbeddingBuffers<T>& buffers,
                              const ActivationPacket<T>& in, int stage_index = -1) {
    const std::size_t d = cfg.d_model;
    const std::size_t batch = in.batch;
    const std::size_t seq = in.seq;
    if (in.token_ids.size() != batch * seq) {
        throw DimensionError("forward_stage: token_ids length does not match batch x seq");
    }
    StageForward<T> res;
    res.tape.token_ids = in.token_ids;
    res.tape.batch = batch;
    res.tape.seq = seq;

    Tensor<T> x;
    if (stage.is_first) {
        if (seq > buffers.pos.extent(0)) {
            throw DimensionError("forward_stage: sequence longer than positional table");
        }
        x = Tensor<T>({batch, seq, d});
        for (std::size_t r = 0; r < batch * seq; ++r) {
            const auto id = in.token_ids[r];
            if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab) {
                throw DimensionError("forward_stage: token id " + std::to_string(id) + " out of range");
            }
            const auto te = stage.embed.row(static_cast<std::size_t>(id));
            const auto tp = buffers.t_perp.row(static_cast<std::size_t>(id));
            const auto pe = buffers.pos.row(r % seq);
            auto xr = x.row(r);
            for (std::size_t j = 0; j < d; ++j) {
                xr[j] = te[j] + tp[j] + pe[j];
            }
        }
    } else {
        if (in.compressed || in.x.shape() != Shape{batch, seq, d}) {
            throw DimensionError("forward_stage: expected uncompressed input of shape " + shape_str({batch, seq, d}));
        }
        x = in.x;
    }

    res.tape.layers.resize(stage.layers.size());
    for (std::size_t l = 0; l < stage.layers.size(); ++l) {
        x = detail::layer_forward(cfg, stage.layers[l], x, batch, seq, res.tape.layers[l]);
    }

    if (stage.is_last) {
        res.tape.x_final = x;
        detail::rmsnorm_forward(x, stage.final_norm, res.tape.n_final, res.tape.inv_rms_final);
        x = detail::linear(res.tape.n_final, stage.head);
    }
    if (!x.all_finite()) {
        throw NumericalError("non-finite activations in stage " + std::to_string(stage_index), -1, stage_index);
    }
    res.out.x = std::move(x);
    res.out.token_ids = in.token_ids;
    res.out.batch = batch;
    res.out.seq = seq;
    res.out.compressed = false;
    return res;
}

/// Reverse-mode pass through one stage. `grad_in` is d loss / d stage output (d loss / d logits for
/// a last stage).
template <Real T>
StageBackward<T> backward_stage(const ModelConfig& cfg, const StageParams<T>& stage, const StageTape<T>& tape,
                                const Tensor<T>& grad_in) {
    const std::size_t batch = tape.batch;
    const std::size_t seq = tape.seq;
    const std::size_t width = stage.is_last ? cfg.vocab : cfg.d_model;
    if (grad_in.shape() != Shape{batch, seq, width}) {
        throw DimensionError("backward_stage: gradient shape " + shape_str(grad_in.shape()) + ", expected " +
                             shape_str({batch, seq, width}));
    }
    if (tape.layers.size() != stage.layers.size()) {
        throw DimensionError("backward_stage: tape does not belong to this stage");
    }
    StageBackward<T> res;
    res.grads = stage.zeros_like();

    Tensor<T> dx;
    if (stage.is_last) {
        Tensor<T> dn;
        detail::linear_backward(tape.n_final, stage.head, grad_in, res.grads.head, dn, false);
        dx = Tensor<T>(tape.x_final.shape());
        detail::rmsnorm_backward(tape.x_final, stage.final_norm, tape.inv_rms_final, dn, dx, res.grads.final_norm);
    } else {
        dx = grad_in;
    }

    for (std::size_t l = stage.layers.size(); l-- > 0;) {
        dx = detail::layer_backward(cfg, stage.layers[l], tape.layers[l], dx, batch, seq, res.grads.layers[l]);
    }

    if (stage.is_first) {
        const std::size_t d = cfg.d_model;
        for (std::size_t r = 0; r < batch * seq; ++r) {
            auto ge = res.grads.embed.row(static_cast<std::size_t>(tape.token_ids[r]));
            const auto gr = dx.row(r);
            for (std::size_t j = 0; j < d; ++j) {
                ge[j] += gr[j];
            }
        }
    } else {
        res.grad_out = std::move(dx);
    }
    return res;
}

template <Real T>
struct LossResult {
    double loss = 0.0;
    Tensor<T> grad;  // d loss / d logits
};

/// Mean next-token cross-entropy over all b*L positions.
template <Real T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
    const std::size_t rows = logits.rows();
    const std::size_t vocab = logits.cols();
    if (targets.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(rows) + " positions");
    }
    LossResult<T> res;
    res.grad = Tensor<T>(logits.shape());
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const auto tgt = targets[i];
        if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab) {
            throw DimensionError("cross_entropy: target " + std::to_string(tgt) + " outside [0, " +
                                 std::to_string(vocab) + ")");
        }
        const auto li = logits.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (T v : li) {
            mx = std::max(mx, static_cast<double>(v));
        }
        double z = 0.0;
        for (T v : li) {
            z += std::exp(static_cast<double>(v) - mx);
        }
        const double log_z = mx + std::log(z);
        total += log_z - static_cast<double>(li[static_cast<std::size_t>(tgt)]);
        auto gi = res.grad.row(i);
        for (std::size_t j = 0; j < vocab; ++j) {
            const double p = std::exp(static_cast<double>(li[j]) - log_z);
            gi[j] = static_cast<T>((p - (j == static_cast<std::size_t>(tgt) ? 1.0 : 0.0)) * inv_n);
        }
    }
    res.loss = total * inv_n;
    if (!std::isfinite(res.loss)) {
        throw NumericalError("non-finite loss");
    }
    return res;
}

/// Forward and backward through a chain of stages without compression. Returns the loss and
/// per-stage gradients.
template <Real T>
struct ChainResult {
    double loss = 0.0;
    std::vector<StageParams<T>> grads;
};

template <Real T>
ChainResult<T> chain_loss_and_grads(const ModelConfig& cfg, const std::vector<StageParams<T>>& stages,
                                    const EmbeddingBuffers<T>& buffers, const std::vector<std::int32_t>& inputs,
                                    const std::vector<std::int32_t>& targets, std::size_t batch, std::size_t seq) {
    ActivationPacket<T> pkt;
    pkt.token_ids = inputs;
    pkt.batch = batch;
    pkt.seq = seq;
    std::vector<StageTape<T>> tapes;
    for (std::size_t s = 0; s < stages.size(); ++s) {
        auto fw = forward_stage(cfg, stages[s], buffers, pkt, static_cast<int>(s));
        tapes.push_back(std::move(fw.tape));
        pkt = std::move(fw.out);
    }
    auto lr = cross_entropy(pkt.x, targets);
    ChainResult<T> res;
    res.loss = lr.loss;
    res.grads.resize(stages.size());
    Tensor<T> g = std::move(lr.grad);
    for (std::size_t s = stages.size(); s-- > 0;) {
        auto bw = backward_stage(cfg, stages[s], tapes[s], g);
        res.grads[s] = std::move(bw.grads);
        g = std::move(bw.grad_out);
    }
    return res;
}

/// Loss only (no tape kept beyond each stage).
template <Real T>
double chain_loss(const ModelConfig& cfg, const std::vector<StageParams<T>>& stages, const EmbeddingBuffers<T>& buffers,
                  const std::vector<std::int32_t>& inputs, const std::vector<std::int32_t>& targets, std::size_t batch,
                  std::size_t seq) {
    ActivationPacket<T> pkt;
    pkt.token_ids = inputs;
    pkt.batch = batch;
    pkt.seq = seq;
    for (std::size_t s = 0; s < stages.size(); ++s) {
        pkt = forward_stage(cfg, stages[s], buffers, pkt, static_cast<int>(s)).out;
    }
    return cross_entropy(pkt.x, targets).loss;
}

}  // namespace hetloco
