#pragma once

// Dense row-major tensor with reverse-mode autodiff.
//
// Tensors are handles onto a shared impl. Ops are pure functions that build a
// DAG; nothing participating in a graph is mutated in place. backward() on a
// scalar walks the graph in reverse topological order and accumulates into
// leaf grads (repeated calls keep accumulating until zero_grad()).

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "hybridlm/common.hpp"
#include "hybridlm/kernels.hpp"

namespace hybridlm {

template <typename T>
struct TensorImpl;

template <typename T>
struct GradNode {
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::function<void(TensorImpl<T>&)> backward;  // reads output grad, accumulates inputs
    const char* op = "";
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until first use
    bool requires_grad = false;
    std::shared_ptr<GradNode<T>> node;  // null for leaves and constants

    int64_t numel() const { return int64_t(values.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), T(0));
    }
};

// Thread-local switch: with grads disabled, ops run as plain math and build
// no graph (used for the teacher forward, tapes, eval, and decoding).
class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set(bool v) { flag() = v; }

private:
    static bool& flag() {
        thread_local bool f = true;
        return f;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl<T>>();
        impl->values.assign(size_t(shape_numel(shape)), T(0));
        impl->shape = std::move(shape);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.impl_->values.begin(), t.impl_->values.end(), v);
        return t;
    }

    static Tensor from_vector(Shape shape, std::vector<T> v, bool requires_grad = false) {
        if (int64_t(v.size()) != shape_numel(shape))
            throw DimError("from_vector: data length " + std::to_string(v.size()) +
                           " does not match shape " + shape_str(shape));
        auto impl = std::make_shared<TensorImpl<T>>();
        impl->shape = std::move(shape);
        impl->values = std::move(v);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor scalar(T v) { return from_vector({}, {v}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return int(impl_->shape.size()); }
    int64_t numel() const { return impl_->numel(); }
    int dim(int i) const {
        const int r = rank();
        if (i < 0) i += r;
        return impl_->shape[size_t(i)];
    }

    std::span<const T> data() const { return impl_->values; }
    // Mutable access is for leaf initialization and optimizer updates only.
    std::span<T> raw() { return impl_->values; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) {
        if (impl_->node) throw ContractError("set_requires_grad: not a leaf");
        impl_->requires_grad = v;
    }
    bool is_leaf() const { return impl_->node == nullptr; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> grad_mut() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ContractError("item: tensor is not a scalar");
        return impl_->values[0];
    }

    T at(std::initializer_list<int> idx) const {
        int64_t off = 0;
        size_t k = 0;
        for (int i : idx) off = off * impl_->shape[k++] + i;
        return impl_->values[size_t(off)];
    }

    // New leaf sharing no graph history (values copied).
    Tensor detach() const {
        auto impl = std::make_shared<TensorImpl<T>>();
        impl->shape = impl_->shape;
        impl->values = impl_->values;
        return Tensor(std::move(impl));
    }

    Tensor clone() const {
        Tensor t = detach();
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    void backward() const;

    std::shared_ptr<TensorImpl<T>>& impl() { return impl_; }
    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

template <typename T>
bool want_grad(std::initializer_list<const Tensor<T>*> ins) {
    if (!GradMode::enabled()) return false;
    for (const Tensor<T>* t : ins)
        if ((*t).requires_grad()) return true;
    return false;
}

template <typename T>
void attach(Tensor<T>& out, std::type_identity_t<std::vector<Tensor<T>>> inputs,
            const char* op,
            std::type_identity_t<std::function<void(TensorImpl<T>&)>> backward) {
    auto node = std::make_shared<GradNode<T>>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
    out.impl()->requires_grad = true;
}

template <typename T>
void add_into(std::vector<T>& dst, const T* src, int64_t n) {
    for (int64_t i = 0; i < n; ++i) dst[size_t(i)] += src[i];
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
    if (!defined()) throw ContractError("backward: undefined tensor");
    if (numel() != 1) throw ContractError("backward: loss must be a scalar");

    // reverse topological order via iterative postorder DFS
    std::vector<TensorImpl<T>*> order;
    std::unordered_set<TensorImpl<T>*> seen;
    std::vector<std::pair<TensorImpl<T>*, size_t>> stack;
    stack.push_back({impl_.get(), 0});
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [cur, next] = stack.back();
        if (cur->node && next < cur->node->inputs.size()) {
            TensorImpl<T>* child = cur->node->inputs[next++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(cur);
            stack.pop_back();
        }
    }

    // Intermediate grads are transient per backward() call; leaf grads persist
    // and accumulate across calls.
    for (TensorImpl<T>* t : order) {
        if (t->node) t->grad.assign(t->values.size(), T(0));
    }
    impl_->ensure_grad();
    impl_->grad[0] += T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl<T>* t = *it;
        if (t->node && t->node->backward) t->node->backward(*t);
    }
}

// ---------------------------------------------------------------------------
// elementwise ops with trailing-dimension broadcast (b's shape must be a
// suffix of a's shape; the scalar shape [] broadcasts over anything)

namespace detail {

template <typename T>
void check_suffix(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sb.size() > sa.size())
        throw DimError(std::string(op) + ": broadcast requires rank(b) <= rank(a), got " +
                       shape_str(sa) + " vs " + shape_str(sb));
    for (size_t i = 0; i < sb.size(); ++i)
        if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i])
            throw DimError(std::string(op) + ": shape " + shape_str(sb) +
                           " is not a trailing suffix of " + shape_str(sa));
}

// fn(av, bv) and partials wrt a and b
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op, F fn,
                           DA dfa, DB dfb) {
    check_suffix(a, b, op);
    const int64_t n = a.numel();
    const int64_t nb = std::max<int64_t>(b.numel(), 1);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.raw().data();
    for (int64_t i = 0; i < n; ++i) po[i] = fn(pa[i], pb[i % nb]);
    if (detail::want_grad<T>({&a, &b})) {
        detail::attach(out, {a, b}, op, [a = a.impl(), b = b.impl(), dfa, dfb, nb](
                                            TensorImpl<T>& o) {
            const int64_t n = o.numel();
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    a->grad[size_t(i)] +=
                        o.grad[size_t(i)] * dfa(a->values[size_t(i)], b->values[size_t(i % nb)]);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    b->grad[size_t(i % nb)] +=
                        o.grad[size_t(i)] * dfb(a->values[size_t(i)], b->values[size_t(i % nb)]);
            }
        });
    }
    return out;
}

template <typename T, typename F, typename DF>
Tensor<T> unary_elementwise(const Tensor<T>& a, const char* op, F fn, DF dfn) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data().data();
    T* po = out.raw().data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fn(pa[i]);
    if (detail::want_grad<T>({&a})) {
        detail::attach(out, {a}, op, [a = a.impl(), dfn](TensorImpl<T>& o) {
            a->ensure_grad();
            const int64_t n = o.numel();
            for (int64_t i = 0; i < n; ++i)
                a->grad[size_t(i)] +=
                    o.grad[size_t(i)] * dfn(a->values[size_t(i)], o.values[size_t(i)]);
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_broadcast(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
    const T sv = T(s);
    return detail::unary_elementwise(
        a, "scale", [sv](T x) { return x * sv; }, [sv](T, T) { return sv; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, -1.0);
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& a) {
    return detail::unary_elementwise(
        a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& a) {
    return detail::unary_elementwise(
        a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
    return detail::unary_elementwise(
        a, "sqrt", [](T x) { return std::sqrt(x); },
        [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    return detail::unary_elementwise(
        a, "silu", [](T x) { return kernels::silu(x); },
        [](T x, T) {
            const T s = kernels::sigmoid(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
    return detail::unary_elementwise(
        a, "softplus", [](T x) { return kernels::softplus(x); },
        [](T x, T) { return kernels::sigmoid(x); });
}

// ---------------------------------------------------------------------------
// matmul: (m,k)@(k,n), (B,m,k)@(k,n), (B,m,k)@(B,k,n)

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const int ra = a.rank(), rb = b.rank();
    if (ra < 2 || rb < 2 || ra > 3 || rb > 3 || (ra == 2 && rb == 3))
        throw DimError("matmul: unsupported ranks " + shape_str(a.shape()) + " @ " +
                       shape_str(b.shape()));
    const int m = a.dim(-2), k = a.dim(-1);
    const int kb = b.dim(-2), n = b.dim(-1);
    if (k != kb)
        throw DimError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " @ " +
                       shape_str(b.shape()));
    const int batch = ra == 3 ? a.dim(0) : 1;
    if (rb == 3 && b.dim(0) != batch)
        throw DimError("matmul: batch dimensions disagree, " + shape_str(a.shape()) + " @ " +
                       shape_str(b.shape()));

    Shape out_shape = ra == 3 ? Shape{batch, m, n} : Shape{m, n};
    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.raw().data();
    const int64_t a_stride = int64_t(m) * k;
    const int64_t b_stride = rb == 3 ? int64_t(k) * n : 0;
    const int64_t o_stride = int64_t(m) * n;
    for (int bi = 0; bi < batch; ++bi)
        kernels::mm_nn(pa + bi * a_stride, pb + bi * b_stride, po + bi * o_stride, m, k, n);

    if (detail::want_grad<T>({&a, &b})) {
        detail::attach(out, {a, b}, "matmul",
                       [ai = a.impl(), bi_ = b.impl(), m, k, n, batch, a_stride, b_stride,
                        o_stride](TensorImpl<T>& o) {
                           const T* go = o.grad.data();
                           if (ai->requires_grad) {
                               ai->ensure_grad();
                               // dA = dC @ B^T
                               for (int bi = 0; bi < batch; ++bi)
                                   kernels::mm_nt(go + bi * o_stride,
                                                  bi_->values.data() + bi * b_stride,
                                                  ai->grad.data() + bi * a_stride, m, n, k,
                                                  true);
                           }
                           if (bi_->requires_grad) {
                               bi_->ensure_grad();
                               // dB = A^T @ dC (summed over batch when B is shared)
                               for (int bi = 0; bi < batch; ++bi)
                                   kernels::mm_tn(ai->values.data() + bi * a_stride,
                                                  go + bi * o_stride,
                                                  bi_->grad.data() + bi * b_stride, m, k, n,
                                                  true);
                           }
                       });
    }
    return out;
}

// swap the last two axes (copy)
template <typename T>
Tensor<T> transpose_last(const Tensor<T>& a) {
    if (a.rank() < 2) throw DimError("transpose_last: rank must be >= 2");
    Shape s = a.shape();
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    const int m = a.dim(-2), n = a.dim(-1);
    const int64_t batch = a.numel() / (int64_t(m) * n);
    Tensor<T> out = Tensor<T>::zeros(std::move(s));
    const T* pa = a.data().data();
    T* po = out.raw().data();
    for (int64_t bi = 0; bi < batch; ++bi) {
        const T* src = pa + bi * m * n;
        T* dst = po + bi * m * n;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) dst[int64_t(j) * m + i] = src[int64_t(i) * n + j];
    }
    if (detail::want_grad<T>({&a})) {
        detail::attach(out, {a}, "transpose_last", [ai = a.impl(), m, n, batch](TensorImpl<T>& o) {
            ai->ensure_grad();
            for (int64_t bi = 0; bi < batch; ++bi) {
                const T* gsrc = o.grad.data() + bi * m * n;
                T* gdst = ai->grad.data() + bi * m * n;
                for (int j = 0; j < n; ++j)
                    for (int i = 0; i < m; ++i)
                        gdst[int64_t(i) * n + j] += gsrc[int64_t(j) * m + i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax family

namespace detail {
struct AxisSplit {
    int64_t outer, axis_n, inner;
};

inline AxisSplit split_axis(const Shape& s, int axis) {
    const int r = int(s.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimError("softmax: axis out of range");
    AxisSplit sp{1, s[size_t(axis)], 1};
    for (int i = 0; i < axis; ++i) sp.outer *= s[size_t(i)];
    for (int i = axis + 1; i < r; ++i) sp.inner *= s[size_t(i)];
    return sp;
}
}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
    const auto sp = detail::split_axis(a.shape(), axis);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data().data();
    T* po = out.raw().data();
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
            const int64_t base = o * sp.axis_n * sp.inner + in;
            T mx = pa[base];
            for (int64_t i = 1; i < sp.axis_n; ++i)
                mx = std::max(mx, pa[base + i * sp.inner]);
            T sum = 0;
            for (int64_t i = 0; i < sp.axis_n; ++i) {
                const T e = std::exp(pa[base + i * sp.inner] - mx);
                po[base + i * sp.inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (int64_t i = 0; i < sp.axis_n; ++i) po[base + i * sp.inner] *= inv;
        }
    }
    if (detail::want_grad<T>({&a})) {
        detail::attach(out, {a}, "softmax", [ai = a.impl(), sp](TensorImpl<T>& o) {
            ai->ensure_grad();
            for (int64_t ob = 0; ob < sp.outer; ++ob) {
                for (int64_t in = 0; in < sp.inner; ++in) {
                    const int64_t base = ob * sp.axis_n * sp.inner + in;
                    T dot = 0;
                    for (int64_t i = 0; i < sp.axis_n; ++i)
                        dot += o.grad[size_t(base + i * sp.inner)] *
                               o.values[size_t(base + i * sp.inner)];
                    for (int64_t i = 0; i < sp.axis_n; ++i) {
                        const int64_t at = base + i * sp.inner;
                        ai->grad[size_t(at)] +=
                            (o.grad[size_t(at)] - dot) * o.values[size_t(at)];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis = -1) {
    const auto sp = detail::split_axis(a.shape(), axis);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data().data();
    T* po = out.raw().data();
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t in = 0; in < sp.inner; ++in) {
            const int64_t base = o * sp.axis_n * sp.inner + in;
            T mx = pa[base];
            for (int64_t i = 1; i < sp.axis_n; ++i)
                mx = std::max(mx, pa[base + i * sp.inner]);
            T sum = 0;
            for (int64_t i = 0; i < sp.axis_n; ++i)
                sum += std::exp(pa[base + i * sp.inner] - mx);
            const T lse = mx + std::log(sum);
            for (int64_t i = 0; i < sp.axis_n; ++i)
                po[base + i * sp.inner] = pa[base + i * sp.inner] - lse;
        }
    }
    if (detail::want_grad<T>({&a})) {
        detail::attach(out, {a}, "log_softmax", [ai = a.impl(), sp](TensorImpl<T>& o) {
            ai->ensure_grad();
            for (int64_t ob = 0; ob < sp.outer; ++ob) {
                for (int64_t in = 0; in < sp.inner; ++in) {
                    const int64_t base = ob * sp.axis_n * sp.inner + in;
                    T gsum = 0;
                    for (int64_t i = 0; i < sp.axis_n; ++i)
                        gsum += o.grad[size_t(base + i * sp.inner)];
                    for (int64_t i = 0; i < sp.axis_n; ++i) {
                        const int64_t at = base + i * sp.inner;
                        ai->grad[size_t(at)] +=
                            o.grad[size_t(at)] - std::exp(o.values[size_t(at)]) * gsum;
                    }
                }
            }
        });
    }
    return out;
}

// softmax over the last axis restricted to positions <= the row index; rows
// are the second-to-last axis (scores must be ... x n x n). Masked entries
// come out exactly 0.
template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& a) {
    if (a.rank() < 2 || a.dim(-1) != a.dim(-2))
        throw DimError("causal_softmax: expected square trailing dims, got " +
                       shape_str(a.shape()));
    const int n = a.dim(-1);
    const int64_t batch = a.numel() / (int64_t(n) * n);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data().data();
    T* po = out.raw().data();
    for (int64_t bi = 0; bi < batch; ++bi) {
        for (int i = 0; i < n; ++i) {
            const T* row = pa + (bi * n + i) * n;
            T* orow = po + (bi * n + i) * n;
            kernels::softmax_row(row, orow, i + 1);
            // entries past the diagonal stay 0
        }
    }
    if (detail::want_grad<T>({&a})) {
        detail::attach(out, {a}, "causal_softmax", [ai = a.impl(), n, batch](TensorImpl<T>& o) {
            ai->ensure_grad();
            for (int64_t bi = 0; bi < batch; ++bi) {
                for (int i = 0; i < n; ++i) {
                    const int64_t base = (bi * n + i) * n;
                    T dot = 0;
                    for (int j = 0; j <= i; ++j)
                        dot += o.grad[size_t(base + j)] * o.values[size_t(base + j)];
                    for (int j = 0; j <= i; ++j)
                        ai->grad[size_t(base + j)] +=
                            (o.grad[size_t(base + j)] - dot) * o.values[size_t(base + j)];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layer norm over the last axis with learnable gamma/beta

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    const int d = x.dim(-1);
    if (gamma.numel() != d || beta.numel() != d)
        throw DimError("layer_norm: gamma/beta must have length " + std::to_string(d));
    const int64_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto mean = std::make_shared<std::vector<T>>(size_t(rows));
    auto rstd = std::make_shared<std::vector<T>>(size_t(rows));
    const T* px = x.data().data();
    T* po = out.raw().data();
    for (int64_t r = 0; r < rows; ++r)
        kernels::layernorm_row(px + r * d, gamma.data().data(), beta.data().data(), eps, d,
                               po + r * d, &(*mean)[size_t(r)], &(*rstd)[size_t(r)]);
    if (detail::want_grad<T>({&x, &gamma, &beta})) {
        detail::attach(
            out, {x, gamma, beta}, "layer_norm",
            [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), mean, rstd, d,
             rows](TensorImpl<T>& o) {
                const T* go = o.grad.data();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* xrow = xi->values.data() + r * d;
                    const T* grow = go + r * d;
                    const T mu = (*mean)[size_t(r)];
                    const T rs = (*rstd)[size_t(r)];
                    if (gi->requires_grad) {
                        gi->ensure_grad();
                        for (int j = 0; j < d; ++j)
                            gi->grad[size_t(j)] += grow[j] * (xrow[j] - mu) * rs;
                    }
                    if (bi->requires_grad) {
                        bi->ensure_grad();
                        for (int j = 0; j < d; ++j) bi->grad[size_t(j)] += grow[j];
                    }
                    if (xi->requires_grad) {
                        xi->ensure_grad();
                        T sum_g = 0, sum_gx = 0;
                        for (int j = 0; j < d; ++j) {
                            const T gh = grow[j] * gi->values[size_t(j)];
                            const T xh = (xrow[j] - mu) * rs;
                            sum_g += gh;
                            sum_gx += gh * xh;
                        }
                        const T inv_d = T(1) / T(d);
                        for (int j = 0; j < d; ++j) {
                            const T gh = grow[j] * gi->values[size_t(j)];
                            const T xh = (xrow[j] - mu) * rs;
                            xi->grad[size_t(r * d + j)] +=
                                rs * (gh - inv_d * sum_g - xh * inv_d * sum_gx);
                        }
                    }
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::want_grad<T>({&a})) {
        detail::attach(out, {a}, "sum_all", [ai = a.impl()](TensorImpl<T>& o) {
            ai->ensure_grad();
            const T g = o.grad[0];
            for (auto& gv : ai->grad) gv += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return scale(sum_all(a), 1.0 / double(a.numel()));
}

// drop the last axis by summation
template <typename T>
Tensor<T> sum_last(const Tensor<T>& a) {
    if (a.rank() < 1) throw DimError("sum_last: rank must be >= 1");
    const int d = a.dim(-1);
    Shape s(a.shape().begin(), a.shape().end() - 1);
    const int64_t rows = a.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(std::move(s));
    const T* pa = a.data().data();
    T* po = out.raw().data();
    for (int64_t r = 0; r < rows; ++r) {
        T acc = 0;
        for (int j = 0; j < d; ++j) acc += pa[r * d + j];
        po[r] = acc;
    }
    if (detail::want_grad<T>({&a})) {
        detail::attach(out, {a}, "sum_last", [ai = a.impl(), d, rows](TensorImpl<T>& o) {
            ai->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < d; ++j) ai->grad[size_t(r * d + j)] += o.grad[size_t(r)];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// slicing / concatenation

// narrow the last axis to [offset, offset+len)
template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, int offset, int len) {
    const int d = a.dim(-1);
    if (offset < 0 || len <= 0 || offset + len > d)
        throw DimError("slice_last: range [" + std::to_string(offset) + "," +
                       std::to_string(offset + len) + ") out of 0.." + std::to_string(d));
    Shape s = a.shape();
    s.back() = len;
    const int64_t rows = a.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(std::move(s));
    const T* pa = a.data().data();
    T* po = out.raw().data();
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(po + r * len, pa + r * d + offset, sizeof(T) * size_t(len));
    if (detail::want_grad<T>({&a})) {
        detail::attach(out, {a}, "slice_last",
                       [ai = a.impl(), d, rows, offset, len](TensorImpl<T>& o) {
                           ai->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r)
                               for (int j = 0; j < len; ++j)
                                   ai->grad[size_t(r * d + offset + j)] +=
                                       o.grad[size_t(r * len + j)];
                       });
    }
    return out;
}

template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimError("concat_last: no inputs");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    int total = 0;
    for (const auto& p : parts) {
        Shape pl(p.shape().begin(), p.shape().end() - 1);
        if (pl != lead) throw DimError("concat_last: leading dims disagree");
        total += p.dim(-1);
    }
    Shape s = lead;
    s.push_back(total);
    const int64_t rows = shape_numel(lead);
    Tensor<T> out = Tensor<T>::zeros(std::move(s));
    T* po = out.raw().data();
    int off = 0;
    for (const auto& p : parts) {
        const int len = p.dim(-1);
        const T* pp = p.data().data();
        for (int64_t r = 0; r < rows; ++r)
            std::memcpy(po + r * total + off, pp + r * len, sizeof(T) * size_t(len));
        off += len;
    }
    bool want = false;
    if (GradMode::enabled())
        for (const auto& p : parts) want = want || p.requires_grad();
    if (want) {
        std::vector<Tensor<T>> inputs = parts;
        std::vector<int> lens;
        for (const auto& p : parts) lens.push_back(p.dim(-1));
        detail::attach(out, inputs, "concat_last",
                       [impls = [&] {
                            std::vector<std::shared_ptr<TensorImpl<T>>> v;
                            for (const auto& p : parts) v.push_back(p.impl());
                            return v;
                        }(),
                        lens, rows, total](TensorImpl<T>& o) {
                           int off = 0;
                           for (size_t pi = 0; pi < impls.size(); ++pi) {
                               const int len = lens[pi];
                               auto& imp = impls[pi];
                               if (imp->requires_grad) {
                                   imp->ensure_grad();
                                   for (int64_t r = 0; r < rows; ++r)
                                       for (int j = 0; j < len; ++j)
                                           imp->grad[size_t(r * len + j)] +=
                                               o.grad[size_t(r * total + off + j)];
                               }
                               off += len;
                           }
                       });
    }
    return out;
}

// rows [offset, offset+len) of the first axis
template <typename T>
Tensor<T> slice_axis0(const Tensor<T>& a, int offset, int len) {
    if (a.rank() < 1) throw DimError("slice_axis0: rank must be >= 1");
    const int n0 = a.shape()[0];
    if (offset < 0 || len <= 0 || offset + len > n0)
        throw DimError("slice_axis0: range out of bounds");
    Shape s = a.shape();
    s[0] = len;
    const int64_t inner = a.numel() / n0;
    Tensor<T> out = Tensor<T>::zeros(std::move(s));
    std::memcpy(out.raw().data(), a.data().data() + int64_t(offset) * inner,
                sizeof(T) * size_t(int64_t(len) * inner));
    if (detail::want_grad<T>({&a})) {
        detail::attach(out, {a}, "slice_axis0",
                       [ai = a.impl(), inner, offset, len](TensorImpl<T>& o) {
                           ai->ensure_grad();
                           for (int64_t i = 0; i < int64_t(len) * inner; ++i)
                               ai->grad[size_t(int64_t(offset) * inner + i)] += o.grad[size_t(i)];
                       });
    }
    return out;
}

// concatenate two rank-3 tensors along axis 1 (the sequence axis)
template <typename T>
Tensor<T> concat_axis1(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw DimError("concat_axis1: shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " not compatible");
    const int B = a.dim(0), na = a.dim(1), nb = b.dim(1), d = a.dim(2);
    Tensor<T> out = Tensor<T>::zeros({B, na + nb, d});
    const int64_t arow = int64_t(na) * d, brow = int64_t(nb) * d;
    T* po = out.raw().data();
    for (int bi = 0; bi < B; ++bi) {
        std::memcpy(po + int64_t(bi) * (arow + brow), a.data().data() + int64_t(bi) * arow,
                    sizeof(T) * size_t(arow));
        std::memcpy(po + int64_t(bi) * (arow + brow) + arow,
                    b.data().data() + int64_t(bi) * brow, sizeof(T) * size_t(brow));
    }
    if (detail::want_grad<T>({&a, &b})) {
        detail::attach(out, {a, b}, "concat_axis1",
                       [ai = a.impl(), bi_ = b.impl(), B, arow, brow](TensorImpl<T>& o) {
                           for (int bi = 0; bi < B; ++bi) {
                               const T* g = o.grad.data() + int64_t(bi) * (arow + brow);
                               if (ai->requires_grad) {
                                   ai->ensure_grad();
                                   for (int64_t i = 0; i < arow; ++i)
                                       ai->grad[size_t(int64_t(bi) * arow + i)] += g[i];
                               }
                               if (bi_->requires_grad) {
                                   bi_->ensure_grad();
                                   for (int64_t i = 0; i < brow; ++i)
                                       bi_->grad[size_t(int64_t(bi) * brow + i)] += g[arow + i];
                               }
                           }
                       });
    }
    return out;
}

// ---------------------------------------------------------------------------
// token batches, embedding lookup, cross entropy

constexpr int32_t kIgnoreTarget = -1;

struct TokenBatch {
    int batch = 0;
    int n = 0;
    std::vector<int32_t> ids;  // batch*n, row major

    int32_t at(int b, int t) const { return ids[size_t(int64_t(b) * n + t)]; }
};

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const TokenBatch& toks) {
    if (table.rank() != 2) throw DimError("embedding: table must be rank 2");
    const int V = table.dim(0), d = table.dim(1);
    Tensor<T> out = Tensor<T>::zeros({toks.batch, toks.n, d});
    const T* pt = table.data().data();
    T* po = out.raw().data();
    const int64_t rows = int64_t(toks.batch) * toks.n;
    for (int64_t r = 0; r < rows; ++r) {
        const int32_t id = toks.ids[size_t(r)];
        if (id < 0 || id >= V)
            throw ContractError("embedding: token id " + std::to_string(id) +
                                " out of vocab " + std::to_string(V));
        std::memcpy(po + r * d, pt + int64_t(id) * d, sizeof(T) * size_t(d));
    }
    if (detail::want_grad<T>({&table})) {
        detail::attach(out, {table}, "embedding",
                       [ti = table.impl(), ids = toks.ids, d, rows](TensorImpl<T>& o) {
                           ti->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r) {
                               const int64_t dst = int64_t(ids[size_t(r)]) * d;
                               for (int j = 0; j < d; ++j)
                                   ti->grad[size_t(dst + j)] += o.grad[size_t(r * d + j)];
                           }
                       });
    }
    return out;
}

// mean negative log likelihood over positions whose target is not ignored
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& targets) {
    const int V = logits.dim(-1);
    const int64_t rows = logits.numel() / V;
    if (int64_t(targets.size()) != rows)
        throw DimError("cross_entropy: expected " + std::to_string(rows) + " targets, got " +
                       std::to_string(targets.size()));
    const T* pl = logits.data().data();
    int64_t kept = 0;
    T loss = 0;
    for (int64_t r = 0; r < rows; ++r) {
        const int32_t y = targets[size_t(r)];
        if (y == kIgnoreTarget) continue;
        if (y < 0 || y >= V)
            throw ContractError("cross_entropy: target " + std::to_string(y) +
                                " out of range [0," + std::to_string(V) + ")");
        const T* row = pl + r * V;
        T mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (int j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
        loss += (mx + std::log(sum)) - row[y];
        ++kept;
    }
    if (kept == 0) throw ContractError("cross_entropy: no un-ignored targets");
    Tensor<T> out = Tensor<T>::scalar(loss / T(kept));
    if (detail::want_grad<T>({&logits})) {
        detail::attach(out, {logits}, "cross_entropy",
                       [li = logits.impl(), targets, V, rows, kept](TensorImpl<T>& o) {
                           li->ensure_grad();
                           const T g = o.grad[0] / T(kept);
                           for (int64_t r = 0; r < rows; ++r) {
                               const int32_t y = targets[size_t(r)];
                               if (y == kIgnoreTarget) continue;
                               const T* row = li->values.data() + r * V;
                               T mx = row[0];
                               for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
                               T sum = 0;
                               for (int j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
                               const T inv = T(1) / sum;
                               for (int j = 0; j < V; ++j) {
                                   T p = std::exp(row[j] - mx) * inv;
                                   if (j == y) p -= T(1);
                                   li->grad[size_t(r * V + j)] += g * p;
                               }
                           }
                       });
    }
    return out;
}

// ---------------------------------------------------------------------------
// small utilities

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
void assert_finite(const Tensor<T>& t, const char* what) {
    if (!all_finite(t))
        throw ContractError(std::string("non-finite values in ") + what);
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimError("max_abs_diff: shapes " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    T m = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.data()[size_t(i)] - b.data()[size_t(i)]));
    return m;
}

template <typename T>
int argmax_row(std::span<const T> row) {
    int best = 0;
    for (int j = 1; j < int(row.size()); ++j)
        if (row[size_t(j)] > row[size_t(best)]) best = j;
    return best;
}

}  // namespace hybridlm
