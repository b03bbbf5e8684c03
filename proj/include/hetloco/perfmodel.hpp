// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "hetloco/error.hpp"

namespace hetloco::perf {

// Analytic step-time model for pipelined replicas with a sparse data-parallel exchange.

struct HardwareSpec {
    double peak_flops = 1e15;  // per replica (all stages together)
    double mfu = 0.4;

    void validate() const {
        if (!(peak_flops > 0.0)) {
            throw ConfigError("peak_flops must be positive", "perf.peak_flops");
        }
        if (!(mfu > 0.0 && mfu <= 1.0)) {
            throw ConfigError("mfu must be in (0, 1]", "perf.mfu");
        }
    }
};

struct LinkSpec {
    double bandwidth_bps = 1e9;
    double latency_s = 0.0;  // per message

    void validate() const {
        if (!(bandwidth_bps > 0.0)) {
            throw ConfigError("bandwidth must be positive", "perf.bandwidth_bps");
        }
        if (!(latency_s >= 0.0)) {
            throw ConfigError("latency must be non-negative", "perf.latency_s");
        }
    }
};

struct PerfScenario {
    double params = 70e9;  // N
    std::size_t d_model = 8192;
    std::size_t seq_len = 2048;
    std::size_t micro_batch = 1;
    std::size_t microbatches = 256;  // per inner step
    std::size_t stages = 4;
    double k_over_d = 0.125;  // 1.0 = uncompressed
    std::size_t h = 50;
    double dp_density = 0.0078125;
    double act_bytes_per_elem = 2.0;
    double dp_bytes_per_value = 6.0;  // value + index
    double dp_volume_factor = 2.0;    // send the update, receive the average
    // Per-message framing. Zero for the idealized model; the desk wire format uses a
    // 16-byte header and 4-byte token ids on forward packets.
    double header_bytes = 0.0;
    double id_bytes_per_token = 0.0;
    // Fraction of step compute that inter-stage traffic can hide behind.
    double overlap = 1.0;

    double tokens_per_step() const {
        return static_cast<double>(micro_batch * seq_len * microbatches);
    }

    /// Transmitted width of an inter-stage tensor.
    std::size_t wire_width() const {
        return static_cast<std::size_t>(std::llround(static_cast<double>(d_model) * k_over_d));
    }

    void validate() const {
        if (!(params > 0.0) || d_model == 0 || seq_len == 0 || micro_batch == 0 || microbatches == 0 || stages == 0 ||
            h == 0) {
            throw ConfigError("perf scenario extents must be positive", "perf");
        }
        if (!(k_over_d > 0.0 && k_over_d <= 1.0)) {
            throw ConfigError("k_over_d must be in (0, 1]", "perf.k_over_d");
        }
        if (wire_width() == 0) {
            throw ConfigError("k_over_d rounds to zero transmitted width", "perf.k_over_d");
        }
        if (!(dp_density >= 0.0 && dp_density <= 1.0)) {
            throw ConfigError("dp_density must be in [0, 1]", "perf.dp_density");
        }
        if (!(overlap >= 0.0 && overlap <= 1.0)) {
            throw ConfigError("overlap must be in [0, 1]", "perf.overlap");
        }
        if (act_bytes_per_elem <= 0.0 || dp_bytes_per_value < 0.0 || dp_volume_factor < 0.0 || header_bytes < 0.0 ||
            id_bytes_per_token < 0.0) {
            throw ConfigError("byte sizes must be non-negative", "perf");
        }
    }
};

/// 6 * N * tokens / (peak * mfu)
inline double step_compute_time(const PerfScenario& s, const HardwareSpec& hw) {
    return 6.0 * s.params * s.tokens_per_step() / (hw.peak_flops * hw.mfu);
}

/// Inter-stage messages per inner step (both directions, all boundaries).
inline double pp_messages_per_step(const PerfScenario& s) {
    return 2.0 * static_cast<double>(s.stages - 1) * static_cast<double>(s.microbatches);
}

/// Inter-stage bytes per inner step.
inline double pp_bytes_per_step(const PerfScenario& s) {
    const double tokens = static_cast<double>(s.micro_batch * s.seq_len);
    const double payload = tokens * static_cast<double>(s.wire_width()) * s.act_bytes_per_elem;
    const double forward = s.header_bytes + tokens * s.id_bytes_per_token + payload;
    const double backward = s.header_bytes + payload;
    return static_cast<double>(s.stages - 1) * static_cast<double>(s.microbatches) * (forward + backward);
}

/// Time to move one step's inter-stage traffic over a single link.
inline double pp_comm_time(const PerfScenario& s, const LinkSpec& link) {
    return pp_bytes_per_step(s) * 8.0 / link.bandwidth_bps + pp_messages_per_step(s) * link.latency_s;
}

/// Inter-stage time left visible after overlapping with compute.
inline double pp_exposed_time(const PerfScenario& s, const HardwareSpec& hw, const LinkSpec& link) {
    return std::max(0.0, pp_comm_time(s, link) - s.overlap * step_compute_time(s, hw));
}

/// Bytes per outer round for one replica's sparse exchange.
inline double dp_bytes_per_round(const PerfScenario& s) {
    return s.params * s.dp_density * s.dp_bytes_per_value * s.dp_volume_factor;
}

/// Seconds per outer round.
inline double dp_comm_time(const PerfScenario& s, const LinkSpec& link) {
    return dp_bytes_per_round(s) * 8.0 / link.bandwidth_bps + s.dp_volume_factor * link.latency_s;
}

inline double step_time(const PerfScenario& s, const HardwareSpec& hw, const LinkSpec& link) {
    return step_compute_time(s, hw) + pp_exposed_time(s, hw, link) + dp_comm_time(s, link) / static_cast<double>(s.h);
}

inline double utilization(const PerfScenario& s, const HardwareSpec& hw, const LinkSpec& link) {
    return step_compute_time(s, hw) / step_time(s, hw, link);
}

inline double wallclock(const PerfScenario& s, const HardwareSpec& hw, const LinkSpec& link, double total_steps) {
    return total_steps * step_time(s, hw, link);
}

struct SweepRow {
    double bandwidth_bps = 0.0;
    double k_over_d = 0.0;
    double utilization = 0.0;
    double wallclock_s = 0.0;
};

/// Evaluates every (ratio, bandwidth) pair; rows are grouped by ratio in input order.
inline std::vector<SweepRow> sweep(const PerfScenario& base, const HardwareSpec& hw, const std::vector<double>& ratios,
                                   const std::vector<double>& bandwidths, double total_steps, double latency_s = 0.0) {
    if (ratios.empty() || bandwidths.empty()) {
        throw ConfigError("sweep needs at least one ratio and one bandwidth", "perf.bandwidths_bps");
    }
    hw.validate();
    std::vector<SweepRow> rows;
    rows.reserve(ratios.size() * bandwidths.size());
    for (double r : ratios) {
        PerfScenario s = base;
        s.k_over_d = r;
        s.validate();
        for (double bw : bandwidths) {
            LinkSpec link{bw, latency_s};
            link.validate();
            rows.push_back({bw, r, utilization(s, hw, link), wallclock(s, hw, link, total_steps)});
        }
    }
    return rows;
}

/// Log-spaced grid from lo to hi inclusive.
inline std::vector<double> log_grid(double lo, double hi, std::size_t points) {
    if (points == 0 || !(lo > 0.0) || !(hi >= lo)) {
        throw ConfigError("invalid bandwidth grid", "perf.bandwidths_bps");
    }
    std::vector<double> g(points);
    if (points == 1) {
        g[0] = lo;
        return g;
    }
    const double a = std::log(lo);
    const double b = std::log(hi);
    for (std::size_t i = 0; i < points; ++i) {
        g[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(points - 1));
    }
    g.front() = lo;
    g.back() = hi;
    return g;
}

/// The 70B, 4-stage reference scenario.
inline PerfScenario reference_70b() { return PerfScenario{}; }

/// A 512M-parameter scenario used for the wall-clock comparison.
inline PerfScenario reference_512m() {
    PerfScenario s;
    s.params = 512e6;
    s.d_model = 1536;
    return s;
}

}  // namespace hetloco::perf
