#pragma once

// Mamba-2-style selective-SSM mixer. Per head the state is a dh x dh matrix
// updated as h_t = exp(dt_t * A) h_{t-1} + dt_t * B_t (x) xv_t with output
// y_t = C_t^T h_t + D * xv_t. A is a scalar per head stored as A_log with
// A = -exp(A_log), so the decay stays in (0,1) for positive dt.
//
// The scan is a fused autograd op over the projected sequences; its gradient
// is validated against finite differences and a brute-force semiseparable
// matrix oracle (selective_scan_materialized) that builds the full n x n
// mixing matrix per head.

#include <optional>

#include "hybridlm/attention.hpp"
#include "hybridlm/rng.hpp"
#include "hybridlm/tensor.hpp"

namespace hybridlm {

template <typename T>
struct Mamba2 {
    int n_heads = 1;
    Tensor<T> w_x, w_b, w_c, w_o;  // d x d
    Tensor<T> w_dt, b_dt;          // d x H, H
    Tensor<T> a_log, d_skip;       // H, H
};

template <typename T>
int mamba_width(const Mamba2<T>& p) {
    return p.w_x.dim(0);
}

template <typename T>
void validate_mamba(const Mamba2<T>& p) {
    const int d = mamba_width(p);
    for (const Tensor<T>* w : {&p.w_x, &p.w_b, &p.w_c, &p.w_o})
        if (w->rank() != 2 || w->dim(0) != d || w->dim(1) != d)
            throw DimError("mamba2: projections must all be d x d");
    if (p.n_heads < 1 || d % p.n_heads != 0)
        throw DimError("mamba2: d not divisible by n_heads");
    if (p.w_dt.dim(0) != d || p.w_dt.dim(1) != p.n_heads)
        throw DimError("mamba2: w_dt must be d x n_heads");
    if (p.b_dt.numel() != p.n_heads || p.a_log.numel() != p.n_heads ||
        p.d_skip.numel() != p.n_heads)
        throw DimError("mamba2: per-head vectors must have length n_heads");
}

// Recurrent state for streaming / cached decoding: one dh x dh matrix per
// (batch item, head). Constant size regardless of how many tokens were seen.
template <typename T>
struct SSMState {
    int batch = 0, n_heads = 0, head_dim = 0;
    std::vector<T> h;  // batch * H * dh * dh

    static SSMState zeros(int batch, int n_heads, int head_dim) {
        SSMState s{batch, n_heads, head_dim, {}};
        s.h.assign(size_t(int64_t(batch) * n_heads * head_dim * head_dim), T(0));
        return s;
    }
    int64_t entries() const { return int64_t(h.size()); }
};

namespace detail {

template <typename T>
kernels::ScanDims<T> scan_dims(const Tensor<T>& xv, int n_heads) {
    const int batch = xv.rank() == 3 ? xv.dim(0) : 1;
    return kernels::ScanDims<T>{batch, xv.dim(-2), xv.dim(-1), n_heads};
}

}  // namespace detail

// Fused scan over projected sequences. xv/bm/cm: (n,d) or (batch,n,d);
// delta: same leading dims with last dim n_heads (already softplus'd, > 0);
// a_coef: per-head A (negative); dsk: per-head skip. The optional initial
// state is treated as a constant (it is never differentiated).
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& xv, const Tensor<T>& bm, const Tensor<T>& cm,
                         const Tensor<T>& delta, const Tensor<T>& a_coef, const Tensor<T>& dsk,
                         int n_heads,
                         std::type_identity_t<const SSMState<T>*> state_in = nullptr,
                         std::type_identity_t<SSMState<T>*> state_out = nullptr) {
    if (xv.shape() != bm.shape() || xv.shape() != cm.shape())
        throw DimError("selective_scan: xv/B/C shapes disagree");
    const auto dims = detail::scan_dims(xv, n_heads);
    if (dims.d % n_heads != 0) throw DimError("selective_scan: d not divisible by n_heads");
    if (delta.dim(-1) != n_heads || delta.numel() != int64_t(dims.batch) * dims.n * n_heads)
        throw DimError("selective_scan: delta must be (batch, n, n_heads)");
    if (a_coef.numel() != n_heads || dsk.numel() != n_heads)
        throw DimError("selective_scan: A and D must have length n_heads");
    assert_finite(delta, "selective_scan delta");
    if (state_in && (state_in->batch != dims.batch || state_in->n_heads != n_heads ||
                     state_in->head_dim != dims.dh()))
        throw DimError("selective_scan: initial state does not match layer dims");

    const bool want = detail::want_grad<T>({&xv, &bm, &cm, &delta, &a_coef, &dsk});
    std::shared_ptr<std::vector<T>> h_hist;
    if (want)
        h_hist = std::make_shared<std::vector<T>>(
            size_t(dims.lanes() * dims.n * dims.dh() * dims.dh()));

    Tensor<T> out = Tensor<T>::zeros(xv.shape());
    if (state_out && (state_out->batch != dims.batch || state_out->n_heads != n_heads ||
                      state_out->head_dim != dims.dh()))
        *state_out = SSMState<T>::zeros(dims.batch, n_heads, dims.dh());
    kernels::selective_scan_forward(dims, xv.data().data(), bm.data().data(),
                                    cm.data().data(), delta.data().data(),
                                    a_coef.data().data(), dsk.data().data(),
                                    state_in ? state_in->h.data() : nullptr, out.raw().data(),
                                    state_out ? state_out->h.data() : nullptr,
                                    h_hist ? h_hist->data() : nullptr);

    if (want) {
        std::shared_ptr<std::vector<T>> h0;
        if (state_in) h0 = std::make_shared<std::vector<T>>(state_in->h);
        detail::attach(
            out, {xv, bm, cm, delta, a_coef, dsk}, "selective_scan",
            [xi = xv.impl(), bi = bm.impl(), ci = cm.impl(), di = delta.impl(),
             ai = a_coef.impl(), ski = dsk.impl(), dims, h_hist, h0](TensorImpl<T>& o) {
                auto grad_or_scratch = [](auto& impl, std::vector<T>& scratch) -> T* {
                    if (impl->requires_grad) {
                        impl->ensure_grad();
                        return impl->grad.data();
                    }
                    scratch.assign(impl->values.size(), T(0));
                    return scratch.data();
                };
                std::vector<T> sx, sb, sc, sd, sa, ss;
                T* dxv = grad_or_scratch(xi, sx);
                T* dbm = grad_or_scratch(bi, sb);
                T* dcm = grad_or_scratch(ci, sc);
                T* ddelta = grad_or_scratch(di, sd);
                T* da = grad_or_scratch(ai, sa);
                T* dd = grad_or_scratch(ski, ss);
                kernels::selective_scan_backward(
                    dims, xi->values.data(), bi->values.data(), ci->values.data(),
                    di->values.data(), ai->values.data(), ski->values.data(),
                    h0 ? h0->data() : nullptr, h_hist->data(), o.grad.data(), dxv, dbm, dcm,
                    ddelta, da, dd);
            });
    }
    return out;
}

// Full mixer: projections, softplus step sizes, fused scan, output projection.
// This is the sequential selective-scan path used both in training and (via
// the returned state) in cached decoding.
template <typename T>
Tensor<T> mamba_mixer(const Mamba2<T>& p, const Tensor<T>& x,
                      std::type_identity_t<const SSMState<T>*> state_in = nullptr,
                      std::type_identity_t<SSMState<T>*> state_out = nullptr) {
    const int d = mamba_width(p);
    if (x.dim(-1) != d) throw DimError("mamba_mixer: input width mismatch");
    Tensor<T> xv = matmul(x, p.w_x);
    Tensor<T> bm = matmul(x, p.w_b);
    Tensor<T> cm = matmul(x, p.w_c);
    Tensor<T> delta = softplus(add(matmul(x, p.w_dt), p.b_dt));
    Tensor<T> a_coef = neg(exp_t(p.a_log));
    Tensor<T> y =
        selective_scan(xv, bm, cm, delta, a_coef, p.d_skip, p.n_heads, state_in, state_out);
    return matmul(y, p.w_o);
}

// ---------------------------------------------------------------------------
// Brute-force oracle: materialize the lower-triangular semiseparable mixing
// matrix M per head, M[t,s] = <C_t, B_s> * dt_s * prod_{r=s+1..t} a_r, and
// apply it to the projected inputs. Test oracle only; O(n^2) memory per head.

namespace detail {

template <typename T>
struct MambaProj {
    int batch, n, d;
    std::vector<T> xv, bm, cm, delta;  // delta: batch*n*H
};

template <typename T>
MambaProj<T> mamba_project_plain(const Mamba2<T>& p, const Tensor<T>& x) {
    const int d = mamba_width(p);
    const int H = p.n_heads;
    const int n = x.dim(-2);
    const int batch = x.rank() == 3 ? x.dim(0) : 1;
    const int64_t rows = int64_t(batch) * n;
    MambaProj<T> pr{batch, n, d, {}, {}, {}, {}};
    pr.xv.resize(size_t(rows * d));
    pr.bm.resize(size_t(rows * d));
    pr.cm.resize(size_t(rows * d));
    pr.delta.resize(size_t(rows * H));
    // plain loops, independent of the tensor op layer
    const T* px = x.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * d;
        for (int j = 0; j < d; ++j) {
            T ax = 0, ab = 0, ac = 0;
            for (int i = 0; i < d; ++i) {
                const T xi = xr[i];
                ax += xi * p.w_x.data()[size_t(int64_t(i) * d + j)];
                ab += xi * p.w_b.data()[size_t(int64_t(i) * d + j)];
                ac += xi * p.w_c.data()[size_t(int64_t(i) * d + j)];
            }
            pr.xv[size_t(r * d + j)] = ax;
            pr.bm[size_t(r * d + j)] = ab;
            pr.cm[size_t(r * d + j)] = ac;
        }
        for (int h = 0; h < H; ++h) {
            T acc = p.b_dt.data()[size_t(h)];
            for (int i = 0; i < d; ++i)
                acc += xr[i] * p.w_dt.data()[size_t(int64_t(i) * H + h)];
            pr.delta[size_t(r * H + h)] = kernels::softplus(acc);
        }
    }
    return pr;
}

template <typename T>
void materialize_lane(const MambaProj<T>& pr, const Mamba2<T>& p, int b, int h, T* m_out) {
    const int dh = pr.d / p.n_heads;
    const int H = p.n_heads;
    const T a = -std::exp(p.a_log.data()[size_t(h)]);
    const int64_t base = int64_t(b) * pr.n * pr.d + int64_t(h) * dh;
    std::fill(m_out, m_out + int64_t(pr.n) * pr.n, T(0));
    for (int s = 0; s < pr.n; ++s) {
        const T* bs = pr.bm.data() + base + int64_t(s) * pr.d;
        const T dt_s = pr.delta[size_t((int64_t(b) * pr.n + s) * H + h)];
        T decay = T(1);
        for (int t = s; t < pr.n; ++t) {
            if (t > s) {
                const T dt_t = pr.delta[size_t((int64_t(b) * pr.n + t) * H + h)];
                decay *= std::exp(dt_t * a);
            }
            const T* ct = pr.cm.data() + base + int64_t(t) * pr.d;
            T dot = 0;
            for (int c = 0; c < dh; ++c) dot += ct[c] * bs[c];
            m_out[int64_t(t) * pr.n + s] = dot * dt_s * decay;
        }
    }
}

}  // namespace detail

// The n x n mixing matrix for one (batch item, head); exposed for tests.
template <typename T>
std::vector<T> materialized_mixing_matrix(const Mamba2<T>& p, const Tensor<T>& x, int b,
                                          int h) {
    auto pr = detail::mamba_project_plain(p, x);
    std::vector<T> m(size_t(int64_t(pr.n) * pr.n));
    detail::materialize_lane(pr, p, b, h, m.data());
    return m;
}

template <typename T>
Tensor<T> selective_scan_materialized(const Mamba2<T>& p, const Tensor<T>& x) {
    validate_mamba(p);
    auto pr = detail::mamba_project_plain(p, x);
    const int dh = pr.d / p.n_heads;
    std::vector<T> mixed(size_t(int64_t(pr.batch) * pr.n * pr.d), T(0));
    std::vector<T> m(size_t(int64_t(pr.n) * pr.n));
    for (int b = 0; b < pr.batch; ++b) {
        for (int h = 0; h < p.n_heads; ++h) {
            detail::materialize_lane(pr, p, b, h, m.data());
            const int64_t base = int64_t(b) * pr.n * pr.d + int64_t(h) * dh;
            const T dsk = p.d_skip.data()[size_t(h)];
            for (int t = 0; t < pr.n; ++t) {
                T* yt = mixed.data() + base + int64_t(t) * pr.d;
                for (int s = 0; s <= t; ++s) {
                    const T w = m[size_t(int64_t(t) * pr.n + s)];
                    const T* xs = pr.xv.data() + base + int64_t(s) * pr.d;
                    for (int c = 0; c < dh; ++c) yt[c] += w * xs[c];
                }
                const T* xt = pr.xv.data() + base + int64_t(t) * pr.d;
                for (int c = 0; c < dh; ++c) yt[c] += dsk * xt[c];
            }
        }
    }
    // output projection, plain loops
    const int64_t rows = int64_t(pr.batch) * pr.n;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    T* po = out.raw().data();
    for (int64_t r = 0; r < rows; ++r) {
        for (int j = 0; j < pr.d; ++j) {
            T acc = 0;
            for (int i = 0; i < pr.d; ++i)
                acc += mixed[size_t(r * pr.d + i)] * p.w_o.data()[size_t(int64_t(i) * pr.d + j)];
            po[r * pr.d + j] = acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention-equivalence mode: builds a Mamba-2 layer that reproduces
// softmax-free recurrent attention exactly. The 1/sqrt(dh) factor is folded
// into W_C, dt is pinned to 1 via the softplus pre-activation, decay is
// disabled with A_log = -inf (so A = -0 and exp(dt*A) = 1), and D = 0.
template <typename T>
Mamba2<T> attention_equivalence_mode(const Attention<T>& attn) {
    validate_attention(attn);
    const int d = attention_width(attn);
    const int dh = d / attn.n_heads;
    Mamba2<T> p;
    p.n_heads = attn.n_heads;
    p.w_x = attn.w_v.detach();
    p.w_b = attn.w_k.detach();
    p.w_c = scale(attn.w_q.detach(), 1.0 / std::sqrt(double(dh)));
    p.w_o = attn.w_o.detach();
    p.w_dt = Tensor<T>::zeros({d, attn.n_heads});
    p.b_dt = Tensor<T>::full({attn.n_heads}, T(std::log(std::expm1(1.0))));
    p.a_log = Tensor<T>::full({attn.n_heads}, -std::numeric_limits<T>::infinity());
    p.d_skip = Tensor<T>::zeros({attn.n_heads});
    return p;
}

// Random initialization for the parameters with no attention counterpart:
// softplus(b_dt) log-uniform in [dt_min, dt_max], A_log uniform in
// [log a_min, log a_max] (A in [-a_max, -a_min]), D = 1.
template <typename T>
void init_mamba_dt_a_d(Mamba2<T>& p, Rng& rng, double dt_min = 1e-3, double dt_max = 0.1,
                       double a_min = 1.0, double a_max = 16.0) {
    const int H = p.n_heads;
    p.b_dt = Tensor<T>::zeros({H}, true);
    p.a_log = Tensor<T>::zeros({H}, true);
    p.d_skip = Tensor<T>::full({H}, T(1), true);
    for (int h = 0; h < H; ++h) {
        const double dt = std::exp(rng.uniform(std::log(dt_min), std::log(dt_max)));
        p.b_dt.raw()[size_t(h)] = T(std::log(std::expm1(dt)));
        p.a_log.raw()[size_t(h)] = T(rng.uniform(std::log(a_min), std::log(a_max)));
    }
}

template <typename T>
Mamba2<T> make_mamba(int d, int n_heads, Rng& rng, double init_std = 0.02) {
    Mamba2<T> p;
    p.n_heads = n_heads;
    for (Tensor<T>* w : {&p.w_x, &p.w_b, &p.w_c, &p.w_o}) {
        *w = Tensor<T>::zeros({d, d}, true);
        for (T& v : w->raw()) v = T(rng.normal(0.0, init_std));
    }
    p.w_dt = Tensor<T>::zeros({d, n_heads}, true);
    for (T& v : p.w_dt.raw()) v = T(rng.normal(0.0, init_std));
    init_mamba_dt_a_d(p, rng);
    validate_mamba(p);
    return p;
}

}  // namespace hybridlm
