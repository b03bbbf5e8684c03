// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hetloco/error.hpp"
#include "hetloco/rng.hpp"
#include "hetloco/tensor.hpp"

namespace hetloco {

// ---------------------------------------------------------------------------
// Raw kernels on row-major spans. Every output element is accumulated over the
// reduction index in ascending order, so results do not depend on blocking or threads.

namespace kernels {

/// c[n x m] (+)= a[n x k] * b[k x m]
template <Real T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t n, std::size_t k,
             std::size_t m, bool accumulate = false) {
    if (!accumulate) {
        std::fill(c.begin(), c.end(), T{0});
    }
    for (std::size_t i = 0; i < n; ++i) {
        T* ci = c.data() + i * m;
        const T* ai = a.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = ai[p];
            const T* bp = b.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                ci[j] += aip * bp[j];
            }
        }
    }
}

/// c[n x m] (+)= a[n x k] * b[m x k]^T
template <Real T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t n, std::size_t k,
             std::size_t m, bool accumulate = false) {
    std::vector<T> bt(k * m);
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t p = 0; p < k; ++p) {
            bt[p * m + j] = b[j * k + p];
        }
    }
    gemm_nn<T>(a, bt, c, n, k, m, accumulate);
}

/// c[n x m] (+)= a[k x n]^T * b[k x m]
template <Real T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t k, std::size_t n,
             std::size_t m, bool accumulate = false) {
    if (!accumulate) {
        std::fill(c.begin(), c.end(), T{0});
    }
    for (std::size_t p = 0; p < k; ++p) {
        const T* ap = a.data() + p * n;
        const T* bp = b.data() + p * m;
        for (std::size_t i = 0; i < n; ++i) {
            const T api = ap[i];
            T* ci = c.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) {
                ci[j] += api * bp[j];
            }
        }
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Tensor-level operations

inline void require_rank2(const Shape& s, const char* what) {
    if (s.size() != 2) {
        throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(s));
    }
}

/// Matrix product. Each output element sums a(i,p)*b(p,j) for p = 0, 1, ... in order.
template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2(a.shape(), "matmul lhs");
    require_rank2(b.shape(), "matmul rhs");
    if (a.extent(1) != b.extent(0)) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Tensor<T> c({a.extent(0), b.extent(1)});
    kernels::gemm_nn<T>(a.data(), b.data(), c.data(), a.extent(0), a.extent(1), b.extent(1));
    return c;
}

/// Applies a [d x m] matrix along the last axis: out[..., m] = x[..., d] * w.
template <Real T>
Tensor<T> matmul_last(const Tensor<T>& x, const Tensor<T>& w) {
    require_rank2(w.shape(), "matmul_last weight");
    if (x.cols() != w.extent(0)) {
        throw DimensionError("matmul_last: last extent " + std::to_string(x.cols()) + " vs weight " +
                             shape_str(w.shape()));
    }
    Shape out_shape = x.shape();
    out_shape.back() = w.extent(1);
    Tensor<T> out(out_shape);
    kernels::gemm_nn<T>(x.data(), w.data(), out.data(), x.rows(), x.cols(), w.extent(1));
    return out;
}

/// out[..., m] = x[..., d] * w^T for w of shape [m x d].
template <Real T>
Tensor<T> matmul_last_t(const Tensor<T>& x, const Tensor<T>& w) {
    require_rank2(w.shape(), "matmul_last_t weight");
    if (x.cols() != w.extent(1)) {
        throw DimensionError("matmul_last_t: last extent " + std::to_string(x.cols()) + " vs weight " +
                             shape_str(w.shape()));
    }
    Shape out_shape = x.shape();
    out_shape.back() = w.extent(0);
    Tensor<T> out(out_shape);
    kernels::gemm_nt<T>(x.data(), w.data(), out.data(), x.rows(), x.cols(), w.extent(0));
    return out;
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_rank2(a.shape(), "transpose");
    Tensor<T> t({a.extent(1), a.extent(0)});
    for (std::size_t i = 0; i < a.extent(0); ++i) {
        for (std::size_t j = 0; j < a.extent(1); ++j) {
            t(j, i) = a(i, j);
        }
    }
    return t;
}

template <Real T>
Tensor<T> identity(std::size_t n) {
    Tensor<T> t({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        t(i, i) = T{1};
    }
    return t;
}

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> c = a;
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] += b[i];
    }
    return c;
}

template <Real T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> c = a;
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] -= b[i];
    }
    return c;
}

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> c = a;
    for (auto& v : c.data()) {
        v *= s;
    }
    return c;
}

template <Real T>
T max_abs(const Tensor<T>& a) {
    T m{0};
    for (T v : a.data()) {
        m = std::max(m, std::abs(v));
    }
    return m;
}

template <Real T>
double frobenius(const Tensor<T>& a) {
    double s = 0.0;
    for (T v : a.data()) {
        s += static_cast<double>(v) * static_cast<double>(v);
    }
    return std::sqrt(s);
}

template <Real T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "max_abs_diff");
    T m{0};
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

/// i.i.d. standard normal samples, reproducible per (seed, stream id).
template <Real T>
Tensor<T> gaussian(RngStream& rng, Shape shape) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) {
        v = static_cast<T>(rng.normal());
    }
    return t;
}

/// Orthonormal basis of Col(a) via Householder QR.
///
/// Work is done in double precision. Columns are sign-normalized so that diag(R) >= 0,
/// which makes the result a deterministic function of `a`. Throws DegenerateBasisError when
/// a pivot falls below 1e-12 * ||a||_F.
template <Real T>
Tensor<T> qr_orthonormalize(const Tensor<T>& a) {
    require_rank2(a.shape(), "qr_orthonormalize");
    const std::size_t d = a.extent(0);
    const std::size_t k = a.extent(1);
    if (k > d) {
        throw DimensionError("qr_orthonormalize: need d >= k, got " + shape_str(a.shape()));
    }

    std::vector<double> r(d * k);
    for (std::size_t i = 0; i < d * k; ++i) {
        r[i] = static_cast<double>(a[i]);
    }
    const double norm_a = frobenius(a);
    const double tol = 1e-12 * norm_a;

    // Householder vectors v_j (length d, zero above j), stored column-wise.
    std::vector<std::vector<double>> reflectors;
    std::vector<double> diag(k);
    for (std::size_t j = 0; j < k; ++j) {
        double col_norm = 0.0;
        for (std::size_t i = j; i < d; ++i) {
            col_norm += r[i * k + j] * r[i * k + j];
        }
        col_norm = std::sqrt(col_norm);
        if (!(col_norm > tol)) {
            throw DegenerateBasisError("qr_orthonormalize: column " + std::to_string(j) +
                                       " is linearly dependent on the previous ones");
        }
        const double alpha = r[j * k + j] >= 0.0 ? -col_norm : col_norm;
        std::vector<double> v(d, 0.0);
        for (std::size_t i = j; i < d; ++i) {
            v[i] = r[i * k + j];
        }
        v[j] -= alpha;
        double v_norm2 = 0.0;
        for (std::size_t i = j; i < d; ++i) {
            v_norm2 += v[i] * v[i];
        }
        if (v_norm2 > 0.0) {
            for (std::size_t c = j; c < k; ++c) {
                double dot = 0.0;
                for (std::size_t i = j; i < d; ++i) {
                    dot += v[i] * r[i * k + c];
                }
                const double f = 2.0 * dot / v_norm2;
                for (std::size_t i = j; i < d; ++i) {
                    r[i * k + c] -= f * v[i];
                }
            }
        }
        diag[j] = r[j * k + j];
        reflectors.push_back(std::move(v));
    }

    // Thin Q = H_0 H_1 ... H_{k-1} [I_k; 0], applied right to left.
    std::vector<double> q(d * k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        q[j * k + j] = 1.0;
    }
    for (std::size_t jj = k; jj-- > 0;) {
        const auto& v = reflectors[jj];
        double v_norm2 = 0.0;
        for (std::size_t i = jj; i < d; ++i) {
            v_norm2 += v[i] * v[i];
        }
        if (v_norm2 == 0.0) {
            continue;
        }
        for (std::size_t c = 0; c < k; ++c) {
            double dot = 0.0;
            for (std::size_t i = jj; i < d; ++i) {
                dot += v[i] * q[i * k + c];
            }
            const double f = 2.0 * dot / v_norm2;
            for (std::size_t i = jj; i < d; ++i) {
                q[i * k + c] -= f * v[i];
            }
        }
    }

    Tensor<T> u({d, k});
    for (std::size_t j = 0; j < k; ++j) {
        const double sign = diag[j] < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < d; ++i) {
            u(i, j) = static_cast<T>(sign * q[i * k + j]);
        }
    }
    return u;
}

}  // namespace hetloco
