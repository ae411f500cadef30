#pragma once

// Compute kernels shared by the tensor ops and the cached decode path.
//
// Every kernel has a serial reference loop and an OpenMP variant selected at
// runtime via set_threads(). Parallelism is always over independent output
// rows or scan lanes and the per-element accumulation order is identical in
// both paths, so results are bit-for-bit equal regardless of thread count.

#include <cmath>
#include <cstdint>
#include <cstring>

#include "hybridlm/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hybridlm::kernels {

// Global thread count. 1 = serial (the default and the deterministic mode).
void set_threads(int n);
int threads();
inline bool parallel_enabled() { return threads() > 1; }

inline bool use_parallel(int64_t work) {
#ifdef _OPENMP
    return threads() > 1 && work >= (int64_t{1} << 15);
#else
    (void)work;
    return false;
#endif
}

// C[m,n] = sum_k A[m,k] * B[k,n]   (accumulate: C += ...)
template <typename T>
void mm_nn_serial(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + int64_t(i) * n;
        if (!accumulate) std::memset(crow, 0, sizeof(T) * n);
        const T* arow = a + int64_t(i) * k;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + int64_t(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
#ifdef _OPENMP
    if (use_parallel(int64_t(m) * k * n)) {
#pragma omp parallel for num_threads(threads()) schedule(static)
        for (int i = 0; i < m; ++i) {
            mm_nn_serial(a + int64_t(i) * k, b, c + int64_t(i) * n, 1, k, n, accumulate);
        }
        return;
    }
#endif
    mm_nn_serial(a, b, c, m, k, n, accumulate);
}

// C[m,n] = sum_k A[m,k] * B[n,k]   (B accessed transposed)
template <typename T>
void mm_nt_serial(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + int64_t(i) * k;
        T* crow = c + int64_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + int64_t(j) * k;
            T acc = 0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

template <typename T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
#ifdef _OPENMP
    if (use_parallel(int64_t(m) * k * n)) {
#pragma omp parallel for num_threads(threads()) schedule(static)
        for (int i = 0; i < m; ++i) {
            mm_nt_serial(a + int64_t(i) * k, b, c + int64_t(i) * n, 1, k, n, accumulate);
        }
        return;
    }
#endif
    mm_nt_serial(a, b, c, m, k, n, accumulate);
}

// C[k1,n] = sum_m A[m,k1] * B[m,n]   (A accessed transposed)
template <typename T>
void mm_tn_serial(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < k; ++i) {
        T* crow = c + int64_t(i) * n;
        if (!accumulate) std::memset(crow, 0, sizeof(T) * n);
        for (int p = 0; p < m; ++p) {
            const T av = a[int64_t(p) * k + i];
            const T* brow = b + int64_t(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
#ifdef _OPENMP
    if (use_parallel(int64_t(m) * k * n)) {
#pragma omp parallel for num_threads(threads()) schedule(static)
        for (int i = 0; i < k; ++i) {
            T* crow = c + int64_t(i) * n;
            if (!accumulate) std::memset(crow, 0, sizeof(T) * n);
            for (int p = 0; p < m; ++p) {
                const T av = a[int64_t(p) * k + i];
                const T* brow = b + int64_t(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
        return;
    }
#endif
    mm_tn_serial(a, b, c, m, k, n, accumulate);
}

// out[j] = sum_i x[i] * W[i,j]  -- row vector times matrix, decode hot path.
template <typename T>
void vec_mat(const T* x, const T* w, T* out, int k, int n) {
    mm_nn_serial(x, w, out, 1, k, n, false);
}

// Numerically stable softmax over one row (in place allowed: out may equal x).
template <typename T>
void softmax_row(const T* x, T* out, int n) {
    T m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    T s = 0;
    for (int i = 0; i < n; ++i) {
        out[i] = std::exp(x[i] - m);
        s += out[i];
    }
    const T inv = T(1) / s;
    for (int i = 0; i < n; ++i) out[i] *= inv;
}

template <typename T>
void layernorm_row(const T* x, const T* gamma, const T* beta, T eps, int d, T* out,
                   T* mean_out = nullptr, T* rstd_out = nullptr) {
    T mean = 0;
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= T(d);
    T var = 0;
    for (int i = 0; i < d; ++i) {
        const T c = x[i] - mean;
        var += c * c;
    }
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (int i = 0; i < d; ++i) out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    if (mean_out) *mean_out = mean;
    if (rstd_out) *rstd_out = rstd;
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T silu(T x) {
    return x * sigmoid(x);
}

template <typename T>
T softplus(T x) {
    if (x > T(30)) return x;
    return std::log1p(std::exp(x));
}

// One timestep of the selective-SSM recurrence for a single head.
//   h[i,j] = exp(dt*a) * h[i,j] + dt * b[i] * xv[j]
//   y[j]   = sum_i c[i] * h[i,j] + d_skip * xv[j]
// h is dh x dh row major. Shared by the batched scan and the decode cache.
template <typename T>
void ssm_lane_step(T* h, const T* xv, const T* b, const T* c, T dt, T a, T d_skip, int dh,
                   T* y) {
    const T decay = std::exp(dt * a);
    for (int i = 0; i < dh; ++i) {
        const T bi = dt * b[i];
        T* hrow = h + int64_t(i) * dh;
        for (int j = 0; j < dh; ++j) hrow[j] = decay * hrow[j] + bi * xv[j];
    }
    for (int j = 0; j < dh; ++j) {
        T acc = 0;
        for (int i = 0; i < dh; ++i) acc += c[i] * h[int64_t(i) * dh + j];
        y[j] = acc + d_skip * xv[j];
    }
}

// Batched selective scan over lanes (batch x head). Layouts:
//   xv, bm, cm, y : [batch, n, d]   (head slice at h*dh)
//   delta         : [batch, n, H]
//   a, d_skip     : [H]
//   h0, hT        : [batch, H, dh, dh] or null (zero init / discard)
//   h_hist        : [batch, H, n, dh, dh] or null (saved post-step states)
template <typename T>
struct ScanDims {
    int batch, n, d, n_heads;
    int dh() const { return d / n_heads; }
    int64_t lanes() const { return int64_t(batch) * n_heads; }
};

template <typename T>
void scan_lane_forward(const ScanDims<T>& dims, int bi, int hi,
                       std::type_identity_t<const T*> xv, std::type_identity_t<const T*> bm,
                       std::type_identity_t<const T*> cm, std::type_identity_t<const T*> delta,
                       std::type_identity_t<const T*> a, std::type_identity_t<const T*> d_skip,
                       std::type_identity_t<const T*> h0, std::type_identity_t<T*> y,
                       std::type_identity_t<T*> hT, std::type_identity_t<T*> h_hist) {
    const int dh = dims.dh();
    const int d = dims.d;
    const int H = dims.n_heads;
    const int64_t state_sz = int64_t(dh) * dh;
    const int64_t lane = int64_t(bi) * H + hi;

    std::vector<T> h(state_sz, T(0));
    if (h0) std::memcpy(h.data(), h0 + lane * state_sz, sizeof(T) * state_sz);

    for (int t = 0; t < dims.n; ++t) {
        const int64_t row = (int64_t(bi) * dims.n + t);
        const T* xt = xv + row * d + int64_t(hi) * dh;
        const T* bt = bm + row * d + int64_t(hi) * dh;
        const T* ct = cm + row * d + int64_t(hi) * dh;
        const T dt = delta[row * H + hi];
        T* yt = y + row * d + int64_t(hi) * dh;
        ssm_lane_step(h.data(), xt, bt, ct, dt, a[hi], d_skip[hi], dh, yt);
        if (h_hist) std::memcpy(h_hist + (lane * dims.n + t) * state_sz, h.data(),
                                sizeof(T) * state_sz);
    }
    if (hT) std::memcpy(hT + lane * state_sz, h.data(), sizeof(T) * state_sz);
}

template <typename T>
void selective_scan_forward(const ScanDims<T>& dims, std::type_identity_t<const T*> xv,
                            std::type_identity_t<const T*> bm,
                            std::type_identity_t<const T*> cm,
                            std::type_identity_t<const T*> delta,
                            std::type_identity_t<const T*> a,
                            std::type_identity_t<const T*> d_skip,
                            std::type_identity_t<const T*> h0, std::type_identity_t<T*> y,
                            std::type_identity_t<T*> hT, std::type_identity_t<T*> h_hist) {
    const int lanes = dims.batch * dims.n_heads;
#ifdef _OPENMP
    if (use_parallel(int64_t(lanes) * dims.n * dims.dh() * dims.dh())) {
#pragma omp parallel for num_threads(threads()) schedule(static)
        for (int lane = 0; lane < lanes; ++lane) {
            scan_lane_forward(dims, lane / dims.n_heads, lane % dims.n_heads, xv, bm, cm,
                              delta, a, d_skip, h0, y, hT, h_hist);
        }
        return;
    }
#endif
    for (int lane = 0; lane < lanes; ++lane) {
        scan_lane_forward(dims, lane / dims.n_heads, lane % dims.n_heads, xv, bm, cm, delta,
                          a, d_skip, h0, y, hT, h_hist);
    }
}

// Reverse-mode pass of the scan. dy is [batch, n, d]; gradient buffers must be
// zero-initialized by the caller except da/dd which take per-lane partials:
// da_part/dd_part are [lanes, H] and reduced serially afterwards, so the
// accumulation order is the same for the serial and OpenMP variants.
template <typename T>
void scan_lane_backward(const ScanDims<T>& dims, int bi, int hi,
                        std::type_identity_t<const T*> xv, std::type_identity_t<const T*> bm,
                        std::type_identity_t<const T*> cm,
                        std::type_identity_t<const T*> delta,
                        std::type_identity_t<const T*> a,
                        std::type_identity_t<const T*> d_skip,
                        std::type_identity_t<const T*> h0,
                        std::type_identity_t<const T*> h_hist,
                        std::type_identity_t<const T*> dy, std::type_identity_t<T*> dxv,
                        std::type_identity_t<T*> dbm, std::type_identity_t<T*> dcm,
                        std::type_identity_t<T*> ddelta, std::type_identity_t<T*> da_part,
                        std::type_identity_t<T*> dd_part) {
    const int dh = dims.dh();
    const int d = dims.d;
    const int H = dims.n_heads;
    const int64_t state_sz = int64_t(dh) * dh;
    const int64_t lane = int64_t(bi) * H + hi;

    std::vector<T> g(state_sz, T(0));
    T da_acc = 0, dd_acc = 0;

    for (int t = dims.n - 1; t >= 0; --t) {
        const int64_t row = (int64_t(bi) * dims.n + t);
        const T* xt = xv + row * d + int64_t(hi) * dh;
        const T* bt = bm + row * d + int64_t(hi) * dh;
        const T* ct = cm + row * d + int64_t(hi) * dh;
        const T* dyt = dy + row * d + int64_t(hi) * dh;
        const T dt = delta[row * H + hi];
        const T decay = std::exp(dt * a[hi]);
        const T* ht = h_hist + (lane * dims.n + t) * state_sz;
        const T* hprev = t > 0 ? h_hist + (lane * dims.n + t - 1) * state_sz
                               : (h0 ? h0 + lane * state_sz : nullptr);

        // y_t = C_t^T h_t + D xv_t
        for (int i = 0; i < dh; ++i) {
            T acc = 0;
            const T* hrow = ht + int64_t(i) * dh;
            for (int j = 0; j < dh; ++j) acc += dyt[j] * hrow[j];
            dcm[row * d + int64_t(hi) * dh + i] += acc;
            T* grow = g.data() + int64_t(i) * dh;
            const T ci = ct[i];
            for (int j = 0; j < dh; ++j) grow[j] += ci * dyt[j];
        }
        for (int j = 0; j < dh; ++j) {
            dd_acc += dyt[j] * xt[j];
            dxv[row * d + int64_t(hi) * dh + j] += d_skip[hi] * dyt[j];
        }

        // h_t = decay * h_{t-1} + dt * B_t (x) xv_t
        T ddecay = 0, dinput = 0;
        for (int i = 0; i < dh; ++i) {
            const T* grow = g.data() + int64_t(i) * dh;
            T gx = 0;
            for (int j = 0; j < dh; ++j) gx += grow[j] * xt[j];
            dinput += gx * bt[i];
            dbm[row * d + int64_t(hi) * dh + i] += dt * gx;
            if (hprev) {
                const T* hp = hprev + int64_t(i) * dh;
                for (int j = 0; j < dh; ++j) ddecay += grow[j] * hp[j];
            }
        }
        for (int j = 0; j < dh; ++j) {
            T acc = 0;
            for (int i = 0; i < dh; ++i) acc += g[int64_t(i) * dh + j] * bt[i];
            dxv[row * d + int64_t(hi) * dh + j] += dt * acc;
        }
        ddelta[row * H + hi] += ddecay * decay * a[hi] + dinput;
        da_acc += ddecay * decay * dt;

        for (int64_t i = 0; i < state_sz; ++i) g[i] *= decay;
    }
    da_part[lane * H + hi] = da_acc;
    dd_part[lane * H + hi] = dd_acc;
}

template <typename T>
void selective_scan_backward(const ScanDims<T>& dims, std::type_identity_t<const T*> xv,
                             std::type_identity_t<const T*> bm,
                             std::type_identity_t<const T*> cm,
                             std::type_identity_t<const T*> delta,
                             std::type_identity_t<const T*> a,
                             std::type_identity_t<const T*> d_skip,
                             std::type_identity_t<const T*> h0,
                             std::type_identity_t<const T*> h_hist,
                             std::type_identity_t<const T*> dy, std::type_identity_t<T*> dxv,
                             std::type_identity_t<T*> dbm, std::type_identity_t<T*> dcm,
                             std::type_identity_t<T*> ddelta, std::type_identity_t<T*> da,
                             std::type_identity_t<T*> dd) {
    const int lanes = dims.batch * dims.n_heads;
    const int H = dims.n_heads;
    std::vector<T> da_part(int64_t(lanes) * H, T(0));
    std::vector<T> dd_part(int64_t(lanes) * H, T(0));
#ifdef _OPENMP
    if (use_parallel(int64_t(lanes) * dims.n * dims.dh() * dims.dh())) {
#pragma omp parallel for num_threads(threads()) schedule(static)
        for (int lane = 0; lane < lanes; ++lane) {
            scan_lane_backward(dims, lane / H, lane % H, xv, bm, cm, delta, a, d_skip, h0,
                               h_hist, dy, dxv, dbm, dcm, ddelta, da_part.data(),
                               dd_part.data());
        }
    } else
#endif
    {
        for (int lane = 0; lane < lanes; ++lane) {
            scan_lane_backward(dims, lane / H, lane % H, xv, bm, cm, delta, a, d_skip, h0,
                               h_hist, dy, dxv, dbm, dcm, ddelta, da_part.data(),
                               dd_part.data());
        }
    }
    // serial reduction in lane order keeps results thread-count independent
    for (int lane = 0; lane < lanes; ++lane) {
        const int hi = lane % H;
        da[hi] += da_part[int64_t(lane) * H + hi];
        dd[hi] += dd_part[int64_t(lane) * H + hi];
    }
}

}  // namespace hybridlm::kernels
