#pragma once

// Binary checkpoint format:
//   magic "HLMCKPT1" (8 bytes), version u32,
//   u64 header length + canonical key-value text (model config, layer plan,
//   init provenance, dtype),
//   u64 parameter count, then per parameter:
//   u32 name length, name bytes, u8 dtype tag, u8 rank, u32 dims[rank],
//   raw little-endian values.
// save(load(f)) reproduces f byte for byte.

#include <bit>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "hybridlm/hybrid.hpp"
#include "hybridlm/model.hpp"

namespace hybridlm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'H', 'L', 'M', 'C', 'K', 'P', 'T', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
    ModelConfig config;
    LayerPlan plan;
    std::string init_origin = "teacher";
    Dtype dtype = Dtype::f32;
};

std::string checkpoint_header_text(const CheckpointInfo& info);
CheckpointInfo parse_checkpoint_header(const std::string& text);

// Reads just the header of a checkpoint file.
CheckpointInfo peek_checkpoint(const std::string& path);

namespace detail {

template <typename V>
void write_pod(std::ofstream& out, const V& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& in) {
    V v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!in) throw InputError("checkpoint: truncated file");
    return v;
}

}  // namespace detail

// Model skeleton with zeroed tensors, shaped per config and plan; used as the
// load target so every parameter arrives by name.
template <typename T>
Model<T> build_model_skeleton(const ModelConfig& cfg, const LayerPlan& plan) {
    cfg.validate();
    Model<T> m;
    m.config = cfg;
    m.plan = plan;
    const int d = cfg.d_model;
    m.tok_emb = Tensor<T>::zeros({cfg.vocab_size, d}, true);
    m.pos_emb = Tensor<T>::zeros({cfg.max_seq_len, d}, true);
    for (int i = 0; i < cfg.n_layers; ++i) {
        DecoderLayer<T> layer;
        if (plan.is_mamba(i)) {
            Mamba2<T> mx;
            mx.n_heads = cfg.n_heads;
            mx.w_x = Tensor<T>::zeros({d, d}, true);
            mx.w_b = Tensor<T>::zeros({d, d}, true);
            mx.w_c = Tensor<T>::zeros({d, d}, true);
            mx.w_o = Tensor<T>::zeros({d, d}, true);
            mx.w_dt = Tensor<T>::zeros({d, cfg.n_heads}, true);
            mx.b_dt = Tensor<T>::zeros({cfg.n_heads}, true);
            mx.a_log = Tensor<T>::zeros({cfg.n_heads}, true);
            mx.d_skip = Tensor<T>::zeros({cfg.n_heads}, true);
            layer.mixer = std::move(mx);
        } else {
            Attention<T> mx;
            mx.n_heads = cfg.n_heads;
            mx.w_q = Tensor<T>::zeros({d, d}, true);
            mx.w_k = Tensor<T>::zeros({d, d}, true);
            mx.w_v = Tensor<T>::zeros({d, d}, true);
            mx.w_o = Tensor<T>::zeros({d, d}, true);
            layer.mixer = std::move(mx);
        }
        layer.norm1 = {Tensor<T>::zeros({d}, true), Tensor<T>::zeros({d}, true)};
        layer.norm2 = {Tensor<T>::zeros({d}, true), Tensor<T>::zeros({d}, true)};
        layer.mlp = {Tensor<T>::zeros({d, cfg.mlp_hidden()}, true),
                     Tensor<T>::zeros({cfg.mlp_hidden()}, true),
                     Tensor<T>::zeros({cfg.mlp_hidden(), d}, true),
                     Tensor<T>::zeros({d}, true)};
        m.layers.push_back(std::move(layer));
    }
    m.final_norm = {Tensor<T>::zeros({d}, true), Tensor<T>::zeros({d}, true)};
    m.head = Tensor<T>::zeros({d, cfg.vocab_size}, true);
    if (cfg.prefix_width > 0)
        m.connector =
            Connector<T>{Tensor<T>::zeros({cfg.prefix_width, d}, true),
                         Tensor<T>::zeros({d}, true)};
    return m;
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write checkpoint '" + path + "'");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_pod(out, kCheckpointVersion);

    CheckpointInfo info{model.config, model.plan, model.init_origin, dtype_of<T>()};
    const std::string header = checkpoint_header_text(info);
    detail::write_pod(out, uint64_t(header.size()));
    out.write(header.data(), int64_t(header.size()));

    uint64_t count = 0;
    auto& mut = const_cast<Model<T>&>(model);
    for_each_parameter(mut, [&](const std::string&, Tensor<T>&) { ++count; });
    detail::write_pod(out, count);
    for_each_parameter(mut, [&](const std::string& name, Tensor<T>& t) {
        detail::write_pod(out, uint32_t(name.size()));
        out.write(name.data(), int64_t(name.size()));
        detail::write_pod(out, uint8_t(dtype_of<T>()));
        detail::write_pod(out, uint8_t(t.rank()));
        for (int i = 0; i < t.rank(); ++i) detail::write_pod(out, uint32_t(t.shape()[size_t(i)]));
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  int64_t(t.numel()) * int64_t(sizeof(T)));
    });
    if (!out) throw InputError("failed while writing checkpoint '" + path + "'");
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kCheckpointMagic))
        throw InputError("'" + path + "' is not a checkpoint (bad magic)");
    const auto version = detail::read_pod<uint32_t>(in);
    if (version != kCheckpointVersion)
        throw InputError("unsupported checkpoint version " + std::to_string(version));
    const auto header_len = detail::read_pod<uint64_t>(in);
    std::string header(header_len, '\0');
    in.read(header.data(), int64_t(header_len));
    if (!in) throw InputError("checkpoint: truncated header");
    CheckpointInfo info = parse_checkpoint_header(header);
    if (info.dtype != dtype_of<T>())
        throw InputError("checkpoint dtype is " + std::string(dtype_name(info.dtype)) +
                         ", expected " + dtype_name(dtype_of<T>()));

    Model<T> model = build_model_skeleton<T>(info.config, info.plan);
    model.init_origin = info.init_origin;
    std::map<std::string, Tensor<T>> by_name;
    for_each_parameter(model,
                       [&](const std::string& name, Tensor<T>& t) { by_name.emplace(name, t); });

    const auto count = detail::read_pod<uint64_t>(in);
    if (count != by_name.size())
        throw InputError("checkpoint: expected " + std::to_string(by_name.size()) +
                         " parameters, file has " + std::to_string(count));
    std::set<std::string> seen;
    for (uint64_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), int64_t(name_len));
        const auto dtype = detail::read_pod<uint8_t>(in);
        const auto rank = detail::read_pod<uint8_t>(in);
        Shape shape;
        for (int r = 0; r < rank; ++r) shape.push_back(int(detail::read_pod<uint32_t>(in)));
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw InputError("checkpoint: unknown parameter '" + name + "'");
        if (!seen.insert(name).second)
            throw InputError("checkpoint: duplicate parameter '" + name + "'");
        if (dtype != uint8_t(dtype_of<T>()))
            throw InputError("checkpoint: dtype mismatch for '" + name + "'");
        if (shape != it->second.shape())
            throw InputError("checkpoint: shape mismatch for '" + name + "': file has " +
                             shape_str(shape) + ", model expects " +
                             shape_str(it->second.shape()));
        in.read(reinterpret_cast<char*>(it->second.raw().data()),
                int64_t(it->second.numel()) * int64_t(sizeof(T)));
        if (!in) throw InputError("checkpoint: truncated values for '" + name + "'");
    }

    if (model.init_origin == "teacher") set_all_trainable(model, true);
    else apply_freeze_mask(model);
    return model;
}

}  // namespace hybridlm
