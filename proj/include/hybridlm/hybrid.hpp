#pragma once

// Teacher -> hybrid conversion and cached autoregressive decoding.
//
// Conversion swaps the attention mixer for a Mamba-2 mixer at the planned
// positions, transferring W_V/W_K/W_Q/W_O into W_x/W_B/W_C/W_O (or drawing
// them fresh for the random-init ablation arm). Everything else is copied
// bit for bit and frozen.
//
// Decoding keeps per-layer caches: attention layers store every past K/V row
// (grows linearly with position), Mamba layers keep one dh x dh state per
// head (constant). The decode path reuses the same scalar kernels as the
// batched forward, so cached logits match full-sequence logits.

#include <span>
#include <variant>

#include "hybridlm/model.hpp"

namespace hybridlm {

enum class InitKind { attention_transfer, random_init };

inline const char* init_kind_name(InitKind k) {
    return k == InitKind::attention_transfer ? "transfer" : "random";
}

inline InitKind parse_init_kind(const std::string& s) {
    if (s == "transfer") return InitKind::attention_transfer;
    if (s == "random") return InitKind::random_init;
    throw InputError("unknown init kind '" + s + "' (expected transfer|random)");
}

template <typename T>
Model<T> clone_model(const Model<T>& src) {
    Model<T> dst;
    dst.config = src.config;
    dst.plan = src.plan;
    dst.init_origin = src.init_origin;
    dst.tok_emb = src.tok_emb.clone();
    dst.pos_emb = src.pos_emb.clone();
    for (const auto& layer : src.layers) {
        DecoderLayer<T> l;
        if (layer.is_mamba()) {
            const Mamba2<T>& mx = layer.mamba();
            l.mixer = Mamba2<T>{mx.n_heads,        mx.w_x.clone(),  mx.w_b.clone(),
                                mx.w_c.clone(),    mx.w_o.clone(),  mx.w_dt.clone(),
                                mx.b_dt.clone(),   mx.a_log.clone(), mx.d_skip.clone()};
        } else {
            const Attention<T>& mx = layer.attention();
            l.mixer = Attention<T>{mx.n_heads, mx.w_q.clone(), mx.w_k.clone(),
                                   mx.w_v.clone(), mx.w_o.clone()};
        }
        l.norm1 = {layer.norm1.gamma.clone(), layer.norm1.beta.clone()};
        l.norm2 = {layer.norm2.gamma.clone(), layer.norm2.beta.clone()};
        l.mlp = {layer.mlp.w1.clone(), layer.mlp.b1.clone(), layer.mlp.w2.clone(),
                 layer.mlp.b2.clone()};
        dst.layers.push_back(std::move(l));
    }
    dst.final_norm = {src.final_norm.gamma.clone(), src.final_norm.beta.clone()};
    dst.head = src.head.clone();
    if (src.connector)
        dst.connector = Connector<T>{src.connector->w.clone(), src.connector->b.clone()};
    return dst;
}

// Build the student. With attention_transfer the replaced layer keeps the
// attention projections as W_x<-W_V, W_B<-W_K, W_C<-W_Q, W_O<-W_O; dt, A and
// D are drawn from their usual init ranges either way (from the same rng
// substream, so the two init arms differ only in the transferred weights).
template <typename T>
Model<T> convert_model(const Model<T>& teacher, const LayerPlan& plan, InitKind init,
                       Rng& rng) {
    if (!teacher.plan.mamba_positions.empty())
        throw ContractError("convert_model: source model already has Mamba layers");
    if (plan.n_layers != teacher.config.n_layers)
        throw ContractError("convert_model: plan covers " + std::to_string(plan.n_layers) +
                            " layers but teacher has " +
                            std::to_string(teacher.config.n_layers));
    for (int pos : plan.mamba_positions)
        if (pos < 0 || pos >= teacher.config.n_layers)
            throw ContractError("convert_model: plan position out of range");

    Model<T> student = clone_model(teacher);
    student.plan = plan;
    student.init_origin = init_kind_name(init);
    Rng dt_stream = rng.stream("convert.dt_a_d");
    Rng w_stream = rng.stream("convert.random_weights");
    for (int pos : plan.mamba_positions) {
        const Attention<T>& attn = student.layers[size_t(pos)].attention();
        if (attn.n_heads != teacher.config.n_heads)
            throw ContractError("convert_model: head count mismatch at layer " +
                                std::to_string(pos));
        const int d = teacher.config.d_model;
        Mamba2<T> mx;
        mx.n_heads = attn.n_heads;
        if (init == InitKind::attention_transfer) {
            mx.w_x = attn.w_v.clone();
            mx.w_b = attn.w_k.clone();
            mx.w_c = attn.w_q.clone();
            mx.w_o = attn.w_o.clone();
        } else {
            // fresh fan-in-scaled projections for the random-init ablation arm
            const double sd = 1.0 / std::sqrt(double(d));
            for (Tensor<T>* w : {&mx.w_x, &mx.w_b, &mx.w_c, &mx.w_o}) {
                *w = Tensor<T>::zeros({d, d}, true);
                for (T& v : w->raw()) v = T(w_stream.normal(0.0, sd));
            }
        }
        mx.w_dt = Tensor<T>::zeros({d, mx.n_heads}, true);
        for (T& v : mx.w_dt.raw()) v = T(dt_stream.normal(0.0, 0.02));
        init_mamba_dt_a_d(mx, dt_stream);
        student.layers[size_t(pos)].mixer = std::move(mx);
    }
    apply_freeze_mask(student);
    return student;
}

// ---------------------------------------------------------------------------
// generation cache

template <typename T>
struct AttnCache {
    std::vector<T> k, v;  // len * d, row per cached position
    int len = 0;
};

template <typename T>
struct MambaCache {
    std::vector<T> h;  // H * dh * dh
};

template <typename T>
struct GenCache {
    std::vector<std::variant<AttnCache<T>, MambaCache<T>>> layers;
    int pos = 0;

    // scratch buffers so decode steps do not allocate
    std::vector<T> x, xn, mix, tmp1, tmp2, hidden, scores, logits;

    int64_t entries() const {
        int64_t n = 0;
        for (const auto& l : layers) {
            if (std::holds_alternative<AttnCache<T>>(l)) {
                const auto& a = std::get<AttnCache<T>>(l);
                n += int64_t(a.k.size()) + int64_t(a.v.size());
            } else {
                n += int64_t(std::get<MambaCache<T>>(l).h.size());
            }
        }
        return n;
    }
    int64_t bytes() const { return entries() * int64_t(sizeof(T)); }
};

template <typename T>
GenCache<T> make_cache(const Model<T>& m, int reserve_len = 0) {
    GenCache<T> c;
    const int d = m.config.d_model;
    const int dh = m.config.head_dim();
    for (const auto& layer : m.layers) {
        if (layer.is_mamba()) {
            MambaCache<T> mc;
            mc.h.assign(size_t(int64_t(m.config.n_heads) * dh * dh), T(0));
            c.layers.push_back(std::move(mc));
        } else {
            AttnCache<T> ac;
            if (reserve_len > 0) {
                ac.k.reserve(size_t(int64_t(reserve_len) * d));
                ac.v.reserve(size_t(int64_t(reserve_len) * d));
            }
            c.layers.push_back(std::move(ac));
        }
    }
    c.x.resize(size_t(d));
    c.xn.resize(size_t(d));
    c.mix.resize(size_t(d));
    c.tmp1.resize(size_t(d));
    c.tmp2.resize(size_t(d));
    c.hidden.resize(size_t(m.config.mlp_hidden()));
    c.logits.resize(size_t(m.config.vocab_size));
    return c;
}

// Exact cache sizes implied by the architecture: 2*t*d entries per attention
// layer after t cached positions, H*dh^2 per Mamba layer regardless of t.
inline int64_t attn_cache_entries(int cached_positions, int d_model) {
    return 2 * int64_t(cached_positions) * d_model;
}
inline int64_t mamba_cache_entries(int n_heads, int head_dim) {
    return int64_t(n_heads) * head_dim * head_dim;
}

template <typename T>
int64_t model_cache_entries(const Model<T>& m, int cached_positions) {
    int64_t n = 0;
    for (const auto& layer : m.layers)
        n += layer.is_mamba() ? mamba_cache_entries(m.config.n_heads, m.config.head_dim())
                              : attn_cache_entries(cached_positions, m.config.d_model);
    return n;
}

// Feed one token through the model with cached state; returns the logits for
// the next position. Mirrors model_forward exactly (same kernels, same
// accumulation order), so cached and full-sequence logits agree.
template <typename T>
std::span<const T> decode_step(const Model<T>& m, GenCache<T>& c, int32_t token) {
    const ModelConfig& cfg = m.config;
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    if (int(c.layers.size()) != cfg.n_layers)
        throw ContractError("decode_step: cache layer count does not match model");
    if (token < 0 || token >= cfg.vocab_size)
        throw ContractError("decode_step: token out of vocab");
    if (c.pos >= cfg.max_seq_len)
        throw ContractError("decode_step: position " + std::to_string(c.pos) +
                            " exceeds max_seq_len");

    T* x = c.x.data();
    const T* te = m.tok_emb.data().data() + int64_t(token) * d;
    const T* pe = m.pos_emb.data().data() + int64_t(c.pos) * d;
    for (int j = 0; j < d; ++j) x[j] = te[j] + pe[j];

    for (int li = 0; li < cfg.n_layers; ++li) {
        const DecoderLayer<T>& layer = m.layers[size_t(li)];
        kernels::layernorm_row(x, layer.norm1.gamma.data().data(),
                               layer.norm1.beta.data().data(), T(1e-5), d, c.xn.data());
        if (layer.is_mamba()) {
            const Mamba2<T>& mx = layer.mamba();
            auto* mc = std::get_if<MambaCache<T>>(&c.layers[size_t(li)]);
            if (!mc) throw ContractError("decode_step: cache kind mismatch at layer " +
                                         std::to_string(li));
            T* xv = c.tmp1.data();
            T* bm = c.tmp2.data();
            kernels::vec_mat(c.xn.data(), mx.w_x.data().data(), xv, d, d);
            kernels::vec_mat(c.xn.data(), mx.w_b.data().data(), bm, d, d);
            std::vector<T>& cmbuf = c.scores;  // reuse, sized below
            cmbuf.resize(size_t(d));
            kernels::vec_mat(c.xn.data(), mx.w_c.data().data(), cmbuf.data(), d, d);
            for (int h = 0; h < H; ++h) {
                T dt_pre = mx.b_dt.data()[size_t(h)];
                for (int i = 0; i < d; ++i)
                    dt_pre += c.xn[size_t(i)] * mx.w_dt.data()[size_t(int64_t(i) * H + h)];
                const T dt = kernels::softplus(dt_pre);
                const T a = -std::exp(mx.a_log.data()[size_t(h)]);
                kernels::ssm_lane_step(mc->h.data() + int64_t(h) * dh * dh, xv + h * dh,
                                       bm + h * dh, cmbuf.data() + h * dh, dt, a,
                                       mx.d_skip.data()[size_t(h)], dh, c.mix.data() + h * dh);
            }
            kernels::vec_mat(c.mix.data(), mx.w_o.data().data(), c.tmp1.data(), d, d);
        } else {
            const Attention<T>& mx = layer.attention();
            auto* ac = std::get_if<AttnCache<T>>(&c.layers[size_t(li)]);
            if (!ac) throw ContractError("decode_step: cache kind mismatch at layer " +
                                         std::to_string(li));
            T* q = c.tmp1.data();
            kernels::vec_mat(c.xn.data(), mx.w_q.data().data(), q, d, d);
            const size_t row = size_t(ac->len) * size_t(d);
            ac->k.resize(row + size_t(d));
            ac->v.resize(row + size_t(d));
            kernels::vec_mat(c.xn.data(), mx.w_k.data().data(), ac->k.data() + row, d, d);
            kernels::vec_mat(c.xn.data(), mx.w_v.data().data(), ac->v.data() + row, d, d);
            ac->len += 1;
            const T sc = T(1) / std::sqrt(T(dh));
            c.scores.resize(size_t(ac->len));
            for (int h = 0; h < H; ++h) {
                for (int t = 0; t < ac->len; ++t) {
                    const T* kt = ac->k.data() + size_t(t) * size_t(d) + size_t(h) * size_t(dh);
                    T acc = 0;
                    for (int cdim = 0; cdim < dh; ++cdim) acc += q[h * dh + cdim] * kt[cdim];
                    c.scores[size_t(t)] = acc * sc;
                }
                kernels::softmax_row(c.scores.data(), c.scores.data(), ac->len);
                T* out = c.mix.data() + h * dh;
                std::fill(out, out + dh, T(0));
                for (int t = 0; t < ac->len; ++t) {
                    const T w = c.scores[size_t(t)];
                    const T* vt = ac->v.data() + size_t(t) * size_t(d) + size_t(h) * size_t(dh);
                    for (int cdim = 0; cdim < dh; ++cdim) out[cdim] += w * vt[cdim];
                }
            }
            kernels::vec_mat(c.mix.data(), mx.w_o.data().data(), c.tmp1.data(), d, d);
        }
        for (int j = 0; j < d; ++j) x[j] += c.tmp1[size_t(j)];

        kernels::layernorm_row(x, layer.norm2.gamma.data().data(),
                               layer.norm2.beta.data().data(), T(1e-5), d, c.xn.data());
        kernels::vec_mat(c.xn.data(), layer.mlp.w1.data().data(), c.hidden.data(), d,
                         cfg.mlp_hidden());
        for (int j = 0; j < cfg.mlp_hidden(); ++j)
            c.hidden[size_t(j)] =
                kernels::silu(c.hidden[size_t(j)] + layer.mlp.b1.data()[size_t(j)]);
        kernels::vec_mat(c.hidden.data(), layer.mlp.w2.data().data(), c.tmp1.data(),
                         cfg.mlp_hidden(), d);
        for (int j = 0; j < d; ++j) x[j] += c.tmp1[size_t(j)] + layer.mlp.b2.data()[size_t(j)];
    }

    kernels::layernorm_row(x, m.final_norm.gamma.data().data(),
                           m.final_norm.beta.data().data(), T(1e-5), d, c.xn.data());
    kernels::vec_mat(c.xn.data(), m.head.data().data(), c.logits.data(), d, cfg.vocab_size);
    c.pos += 1;
    return c.logits;
}

// Greedy continuation: feeds the prompt, then emits n_new argmax tokens.
template <typename T>
std::vector<int32_t> generate(const Model<T>& m, std::span<const int32_t> prompt, int n_new,
                              GenCache<T>& cache) {
    if (prompt.empty()) throw ContractError("generate: prompt must be nonempty");
    if (n_new < 0) throw ContractError("generate: n_new must be >= 0");
    std::span<const T> logits;
    for (int32_t tok : prompt) logits = decode_step(m, cache, tok);
    std::vector<int32_t> out;
    out.reserve(size_t(n_new));
    for (int i = 0; i < n_new; ++i) {
        const int32_t next = int32_t(argmax_row(logits));
        out.push_back(next);
        logits = decode_step(m, cache, next);
    }
    return out;
}

}  // namespace hybridlm
