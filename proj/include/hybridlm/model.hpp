#pragma once

// Decoder layers (mixer + MLP with pre-norm residuals), the teacher model and
// its hybrid students. Conversion only ever swaps the mixer; norms, MLP,
// embeddings and the output head are identical across teacher and student.

#include <optional>
#include <variant>

#include "hybridlm/mamba.hpp"
#include "hybridlm/plan.hpp"

namespace hybridlm {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 64;
    int n_heads = 4;
    int vocab_size = 32;
    int max_seq_len = 128;
    int prefix_width = 0;  // > 0 enables the connector input path

    int head_dim() const { return d_model / n_heads; }
    int mlp_hidden() const { return 4 * d_model; }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 2 || max_seq_len < 1)
            throw InputError("model config: dimensions must be positive (vocab >= 2)");
        if (d_model % n_heads != 0)
            throw InputError("model config: d_model must be divisible by n_heads");
    }

    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma, beta;  // d
};

template <typename T>
struct Mlp {
    Tensor<T> w1, b1, w2, b2;  // d x 4d, 4d, 4d x d, d
};

template <typename T>
struct DecoderLayer {
    std::variant<Attention<T>, Mamba2<T>> mixer;
    LayerNormParams<T> norm1, norm2;
    Mlp<T> mlp;

    bool is_mamba() const { return std::holds_alternative<Mamba2<T>>(mixer); }
    Attention<T>& attention() { return std::get<Attention<T>>(mixer); }
    const Attention<T>& attention() const { return std::get<Attention<T>>(mixer); }
    Mamba2<T>& mamba() { return std::get<Mamba2<T>>(mixer); }
    const Mamba2<T>& mamba() const { return std::get<Mamba2<T>>(mixer); }
};

// Trainable projection from prefix feature width into the embedding space.
template <typename T>
struct Connector {
    Tensor<T> w, b;  // prefix_width x d, d
};

template <typename T>
struct Model {
    ModelConfig config;
    LayerPlan plan;                       // empty positions -> pure transformer
    std::string init_origin = "teacher";  // teacher | transfer | random
    Tensor<T> tok_emb;                    // vocab x d
    Tensor<T> pos_emb;                    // max_seq x d
    std::vector<DecoderLayer<T>> layers;
    LayerNormParams<T> final_norm;
    Tensor<T> head;  // d x vocab
    std::optional<Connector<T>> connector;
};

// Continuous prefix vectors fed through the connector ahead of the token
// embeddings (the toy stand-in for non-text inputs).
template <typename T>
struct PrefixBatch {
    int count = 0, width = 0;
    std::vector<T> feats;  // batch * count * width
};

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
};

// ---------------------------------------------------------------------------
// construction

namespace detail {
template <typename T>
Tensor<T> randn_param(Shape shape, Rng& rng, double stddev) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
    for (T& v : t.raw()) v = T(rng.normal(0.0, stddev));
    return t;
}
}  // namespace detail

template <typename T>
DecoderLayer<T> make_attention_layer(const ModelConfig& cfg, Rng& rng, double init_std) {
    DecoderLayer<T> layer;
    layer.mixer = make_attention<T>(cfg.d_model, cfg.n_heads, rng, init_std);
    layer.norm1 = {Tensor<T>::full({cfg.d_model}, T(1), true),
                   Tensor<T>::zeros({cfg.d_model}, true)};
    layer.norm2 = {Tensor<T>::full({cfg.d_model}, T(1), true),
                   Tensor<T>::zeros({cfg.d_model}, true)};
    layer.mlp.w1 = detail::randn_param<T>({cfg.d_model, cfg.mlp_hidden()}, rng, init_std);
    layer.mlp.b1 = Tensor<T>::zeros({cfg.mlp_hidden()}, true);
    layer.mlp.w2 = detail::randn_param<T>({cfg.mlp_hidden(), cfg.d_model}, rng, init_std);
    layer.mlp.b2 = Tensor<T>::zeros({cfg.d_model}, true);
    return layer;
}

// All-attention decoder stack with random weights.
template <typename T>
Model<T> build_teacher(const ModelConfig& cfg, Rng& rng, double init_std = 0.02) {
    cfg.validate();
    Model<T> m;
    m.config = cfg;
    m.plan = LayerPlan::none(cfg.n_layers);
    Rng init = rng.stream("model_init");
    m.tok_emb = detail::randn_param<T>({cfg.vocab_size, cfg.d_model}, init, init_std);
    m.pos_emb = detail::randn_param<T>({cfg.max_seq_len, cfg.d_model}, init, init_std);
    for (int i = 0; i < cfg.n_layers; ++i)
        m.layers.push_back(make_attention_layer<T>(cfg, init, init_std));
    m.final_norm = {Tensor<T>::full({cfg.d_model}, T(1), true),
                    Tensor<T>::zeros({cfg.d_model}, true)};
    m.head = detail::randn_param<T>({cfg.d_model, cfg.vocab_size}, init, init_std);
    if (cfg.prefix_width > 0) {
        Connector<T> c;
        c.w = detail::randn_param<T>({cfg.prefix_width, cfg.d_model}, init, init_std);
        c.b = Tensor<T>::zeros({cfg.d_model}, true);
        m.connector = std::move(c);
    }
    return m;
}

// ---------------------------------------------------------------------------
// parameter registry

template <typename T, typename Fn>
void for_each_parameter(Model<T>& m, Fn fn) {
    fn("tok_emb", m.tok_emb);
    fn("pos_emb", m.pos_emb);
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        DecoderLayer<T>& layer = m.layers[i];
        fn(p + "norm1.gamma", layer.norm1.gamma);
        fn(p + "norm1.beta", layer.norm1.beta);
        if (layer.is_mamba()) {
            Mamba2<T>& mx = layer.mamba();
            fn(p + "mixer.W_x", mx.w_x);
            fn(p + "mixer.W_B", mx.w_b);
            fn(p + "mixer.W_C", mx.w_c);
            fn(p + "mixer.W_O", mx.w_o);
            fn(p + "mixer.W_dt", mx.w_dt);
            fn(p + "mixer.b_dt", mx.b_dt);
            fn(p + "mixer.A_log", mx.a_log);
            fn(p + "mixer.D", mx.d_skip);
        } else {
            Attention<T>& mx = layer.attention();
            fn(p + "mixer.W_Q", mx.w_q);
            fn(p + "mixer.W_K", mx.w_k);
            fn(p + "mixer.W_V", mx.w_v);
            fn(p + "mixer.W_O", mx.w_o);
        }
        fn(p + "norm2.gamma", layer.norm2.gamma);
        fn(p + "norm2.beta", layer.norm2.beta);
        fn(p + "mlp.W1", layer.mlp.w1);
        fn(p + "mlp.b1", layer.mlp.b1);
        fn(p + "mlp.W2", layer.mlp.w2);
        fn(p + "mlp.b2", layer.mlp.b2);
    }
    fn("final_norm.gamma", m.final_norm.gamma);
    fn("final_norm.beta", m.final_norm.beta);
    fn("head", m.head);
    if (m.connector) {
        fn("connector.W", m.connector->w);
        fn("connector.b", m.connector->b);
    }
}

template <typename T>
std::vector<Parameter<T>> named_parameters(Model<T>& m) {
    std::vector<Parameter<T>> out;
    for_each_parameter(m, [&](const std::string& name, Tensor<T>& t) {
        out.push_back({name, t, t.requires_grad()});
    });
    return out;
}

template <typename T>
int64_t parameter_count(Model<T>& m) {
    int64_t n = 0;
    for_each_parameter(m, [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
}

template <typename T>
void set_all_trainable(Model<T>& m, bool v) {
    for_each_parameter(m, [&](const std::string&, Tensor<T>& t) { t.set_requires_grad(v); });
}

// Only Mamba-2 mixers and the connector stay trainable; everything else is
// frozen (the optimizer never touches it and no grads are computed for it).
template <typename T>
void apply_freeze_mask(Model<T>& m) {
    for_each_parameter(m, [&](const std::string& name, Tensor<T>& t) {
        bool trainable = name.rfind("connector.", 0) == 0;
        if (name.rfind("layers.", 0) == 0 && name.find(".mixer.") != std::string::npos)
            trainable = m.plan.is_mamba(std::stoi(name.substr(7)));
        t.set_requires_grad(trainable);
    });
}

template <typename T>
void zero_all_grads(Model<T>& m) {
    for_each_parameter(m, [&](const std::string&, Tensor<T>& t) { t.zero_grad(); });
}

// ---------------------------------------------------------------------------
// forward

template <typename T>
Tensor<T> mixer_forward(const DecoderLayer<T>& layer, const Tensor<T>& normed) {
    if (layer.is_mamba()) return mamba_mixer(layer.mamba(), normed);
    return causal_attention(layer.attention(), normed);
}

// x + mixer(norm1(x)) -- the sub-block whose output the layer-wise
// distillation loss compares between teacher and student.
template <typename T>
Tensor<T> mixer_sublayer_forward(const DecoderLayer<T>& layer, const Tensor<T>& x) {
    return add(x, mixer_forward(layer, layer_norm(x, layer.norm1.gamma, layer.norm1.beta)));
}

template <typename T>
Tensor<T> mlp_forward(const Mlp<T>& mlp, const Tensor<T>& x) {
    return add(matmul(silu(add(matmul(x, mlp.w1), mlp.b1)), mlp.w2), mlp.b2);
}

template <typename T>
Tensor<T> decoder_layer_forward(const DecoderLayer<T>& layer, const Tensor<T>& x) {
    Tensor<T> u = mixer_sublayer_forward(layer, x);
    return add(u, mlp_forward(layer.mlp, layer_norm(u, layer.norm2.gamma, layer.norm2.beta)));
}

// Teacher hidden states captured at the planned positions: the state entering
// layer l_i and the mixer sub-block output of layer l_i (both detached).
template <typename T>
struct LayerTapes {
    std::vector<int> positions;
    std::vector<Tensor<T>> inputs;
    std::vector<Tensor<T>> outputs;
};

// Token (and optional prefix) sequence -> logits over the vocab at every
// position. Causal: logits at position t never depend on later positions.
template <typename T>
Tensor<T> model_forward(const Model<T>& m, const TokenBatch& toks,
                        std::type_identity_t<const PrefixBatch<T>*> prefix = nullptr,
                        std::type_identity_t<LayerTapes<T>*> tapes = nullptr) {
    if (toks.batch < 1 || toks.n < 1) throw ContractError("model_forward: empty batch");
    Tensor<T> x = embedding(m.tok_emb, toks);
    int prefix_len = 0;
    if (prefix && prefix->count > 0) {
        if (!m.connector)
            throw ContractError("model_forward: prefix features given but model has no connector");
        if (prefix->width != m.config.prefix_width)
            throw DimError("model_forward: prefix width mismatch");
        Tensor<T> feats = Tensor<T>::from_vector({toks.batch, prefix->count, prefix->width},
                                                 prefix->feats);
        x = concat_axis1(add(matmul(feats, m.connector->w), m.connector->b), x);
        prefix_len = prefix->count;
    }
    const int total = prefix_len + toks.n;
    if (total > m.config.max_seq_len)
        throw ContractError("model_forward: sequence length " + std::to_string(total) +
                            " exceeds max_seq_len " + std::to_string(m.config.max_seq_len));
    x = add(x, slice_axis0(m.pos_emb, 0, total));
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const bool tape_here =
            tapes && std::binary_search(tapes->positions.begin(), tapes->positions.end(),
                                        int(i));
        if (tape_here) tapes->inputs.push_back(x.detach());
        Tensor<T> u = mixer_sublayer_forward(m.layers[i], x);
        if (tape_here) tapes->outputs.push_back(u.detach());
        x = add(u, mlp_forward(m.layers[i].mlp,
                               layer_norm(u, m.layers[i].norm2.gamma, m.layers[i].norm2.beta)));
    }
    x = layer_norm(x, m.final_norm.gamma, m.final_norm.beta);
    return matmul(x, m.head);
}

}  // namespace hybridlm
