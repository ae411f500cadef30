#pragma once

// Causal multi-head attention in three forms: the standard softmax form used
// for training, and two softmax-free forms (quadratic and recurrent) that are
// algebraically equal to each other. The softmax-free forms are test-only
// mixers; they exist to validate the attention -> SSM weight mapping, so they
// are written as plain loops with no autograd graph.

#include "hybridlm/rng.hpp"
#include "hybridlm/tensor.hpp"

namespace hybridlm {

template <typename T>
struct Attention {
    int n_heads = 1;
    Tensor<T> w_q, w_k, w_v, w_o;  // all d x d
};

template <typename T>
int attention_width(const Attention<T>& p) {
    return p.w_q.dim(0);
}

template <typename T>
void validate_attention(const Attention<T>& p) {
    const int d = attention_width(p);
    for (const Tensor<T>* w : {&p.w_q, &p.w_k, &p.w_v, &p.w_o})
        if (w->rank() != 2 || w->dim(0) != d || w->dim(1) != d)
            throw DimError("attention: projections must all be d x d");
    if (p.n_heads < 1 || d % p.n_heads != 0)
        throw DimError("attention: d=" + std::to_string(d) + " not divisible by n_heads=" +
                       std::to_string(p.n_heads));
}

template <typename T>
Attention<T> make_attention(int d, int n_heads, Rng& rng, double init_std = 0.02) {
    Attention<T> p;
    p.n_heads = n_heads;
    for (Tensor<T>* w : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
        *w = Tensor<T>::zeros({d, d}, true);
        for (T& v : w->raw()) v = T(rng.normal(0.0, init_std));
    }
    validate_attention(p);
    return p;
}

// Standard causal attention: per head, y_i = sum_{t<=i} softmax(q_i k_t / sqrt(dh)) v_t,
// heads concatenated, then the output projection. x is (n,d) or (batch,n,d).
template <typename T>
Tensor<T> causal_attention(const Attention<T>& p, const Tensor<T>& x) {
    const int d = attention_width(p);
    if (x.dim(-1) != d)
        throw DimError("causal_attention: input width " + std::to_string(x.dim(-1)) +
                       " != d " + std::to_string(d));
    const int dh = d / p.n_heads;
    const double sc = 1.0 / std::sqrt(double(dh));
    Tensor<T> q = matmul(x, p.w_q);
    Tensor<T> k = matmul(x, p.w_k);
    Tensor<T> v = matmul(x, p.w_v);
    std::vector<Tensor<T>> heads;
    heads.reserve(size_t(p.n_heads));
    for (int h = 0; h < p.n_heads; ++h) {
        Tensor<T> qh = slice_last(q, h * dh, dh);
        Tensor<T> kh = slice_last(k, h * dh, dh);
        Tensor<T> vh = slice_last(v, h * dh, dh);
        Tensor<T> weights = causal_softmax(scale(matmul(qh, transpose_last(kh)), sc));
        heads.push_back(matmul(weights, vh));
    }
    return matmul(concat_last(heads), p.w_o);
}

namespace detail {

// projections for the softmax-free paths, rank normalized to (batch, n, d)
template <typename T>
struct SfProj {
    int batch, n, d;
    std::vector<T> q, k, v;
};

template <typename T>
SfProj<T> sf_project(const Attention<T>& p, const Tensor<T>& x) {
    const int d = attention_width(p);
    if (x.dim(-1) != d) throw DimError("softmax_free_attention: input width mismatch");
    const int n = x.dim(-2);
    const int batch = x.rank() == 3 ? x.dim(0) : 1;
    SfProj<T> pr{batch, n, d, {}, {}, {}};
    const int64_t rows = int64_t(batch) * n;
    pr.q.resize(size_t(rows * d));
    pr.k.resize(size_t(rows * d));
    pr.v.resize(size_t(rows * d));
    kernels::mm_nn(x.data().data(), p.w_q.data().data(), pr.q.data(), int(rows), d, d);
    kernels::mm_nn(x.data().data(), p.w_k.data().data(), pr.k.data(), int(rows), d, d);
    kernels::mm_nn(x.data().data(), p.w_v.data().data(), pr.v.data(), int(rows), d, d);
    return pr;
}

template <typename T>
Tensor<T> sf_output(const Attention<T>& p, const Tensor<T>& x, const std::vector<T>& mixed) {
    const int d = attention_width(p);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    kernels::mm_nn(mixed.data(), p.w_o.data().data(), out.raw().data(),
                   int(x.numel() / d), d, d);
    return out;
}

}  // namespace detail

// Softmax-free attention computed through the explicit n x n masked score
// matrix: y_i = sum_{t<=i} (q_i k_t / sqrt(dh)) v_t per head.
template <typename T>
Tensor<T> softmax_free_attention_quadratic(const Attention<T>& p, const Tensor<T>& x) {
    auto pr = detail::sf_project(p, x);
    const int dh = pr.d / p.n_heads;
    const T sc = T(1) / std::sqrt(T(dh));
    std::vector<T> mixed(size_t(int64_t(pr.batch) * pr.n * pr.d), T(0));
    std::vector<T> scores(size_t(pr.n) * size_t(pr.n));
    for (int b = 0; b < pr.batch; ++b) {
        for (int h = 0; h < p.n_heads; ++h) {
            const int64_t base = int64_t(b) * pr.n * pr.d + int64_t(h) * dh;
            std::fill(scores.begin(), scores.end(), T(0));
            for (int i = 0; i < pr.n; ++i) {
                const T* qi = pr.q.data() + base + int64_t(i) * pr.d;
                for (int t = 0; t <= i; ++t) {
                    const T* kt = pr.k.data() + base + int64_t(t) * pr.d;
                    T acc = 0;
                    for (int c = 0; c < dh; ++c) acc += qi[c] * kt[c];
                    scores[size_t(i) * pr.n + t] = acc * sc;
                }
            }
            for (int i = 0; i < pr.n; ++i) {
                T* yi = mixed.data() + base + int64_t(i) * pr.d;
                for (int t = 0; t <= i; ++t) {
                    const T w = scores[size_t(i) * pr.n + t];
                    const T* vt = pr.v.data() + base + int64_t(t) * pr.d;
                    for (int c = 0; c < dh; ++c) yi[c] += w * vt[c];
                }
            }
        }
    }
    return detail::sf_output(p, x, mixed);
}

// The same value computed as a linear RNN: h_t = h_{t-1} + k_t^T v_t,
// y_t = (q_t / sqrt(dh)) h_t. O(n * dh^2) per head, constant state.
template <typename T>
Tensor<T> softmax_free_attention_recurrent(const Attention<T>& p, const Tensor<T>& x) {
    auto pr = detail::sf_project(p, x);
    const int dh = pr.d / p.n_heads;
    const T sc = T(1) / std::sqrt(T(dh));
    std::vector<T> mixed(size_t(int64_t(pr.batch) * pr.n * pr.d), T(0));
    std::vector<T> state(size_t(dh) * size_t(dh));
    for (int b = 0; b < pr.batch; ++b) {
        for (int h = 0; h < p.n_heads; ++h) {
            const int64_t base = int64_t(b) * pr.n * pr.d + int64_t(h) * dh;
            std::fill(state.begin(), state.end(), T(0));
            for (int t = 0; t < pr.n; ++t) {
                const T* kt = pr.k.data() + base + int64_t(t) * pr.d;
                const T* vt = pr.v.data() + base + int64_t(t) * pr.d;
                const T* qt = pr.q.data() + base + int64_t(t) * pr.d;
                for (int i = 0; i < dh; ++i) {
                    T* hrow = state.data() + size_t(i) * size_t(dh);
                    const T ki = kt[i];
                    for (int j = 0; j < dh; ++j) hrow[j] += ki * vt[j];
                }
                T* yt = mixed.data() + base + int64_t(t) * pr.d;
                for (int j = 0; j < dh; ++j) {
                    T acc = 0;
                    for (int i = 0; i < dh; ++i) acc += qt[i] * state[size_t(i) * size_t(dh) + j];
                    yt[j] = acc * sc;
                }
            }
        }
    }
    return detail::sf_output(p, x, mixed);
}

}  // namespace hybridlm
