#include "hybridlm/checkpoint.hpp"

#include <sstream>

#include "hybridlm/config.hpp"

namespace hybridlm {

std::string checkpoint_header_text(const CheckpointInfo& info) {
    std::ostringstream out;
    out << "n_layers = " << info.config.n_layers << "\n";
    out << "d_model = " << info.config.d_model << "\n";
    out << "n_heads = " << info.config.n_heads << "\n";
    out << "vocab_size = " << info.config.vocab_size << "\n";
    out << "max_seq_len = " << info.config.max_seq_len << "\n";
    out << "prefix_width = " << info.config.prefix_width << "\n";
    out << "ratio = " << format_double(info.plan.ratio) << "\n";
    out << "strategy = " << placement_name(info.plan.strategy) << "\n";
    out << "init = " << info.init_origin << "\n";
    out << "dtype = " << dtype_name(info.dtype) << "\n";
    out << "mamba_positions = ";
    for (size_t i = 0; i < info.plan.mamba_positions.size(); ++i) {
        if (i) out << ",";
        out << info.plan.mamba_positions[i];
    }
    out << "\n";
    return out.str();
}

CheckpointInfo parse_checkpoint_header(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw InputError("checkpoint header: malformed line");
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        auto strip = [](std::string& s) {
            while (!s.empty() && (s.front() == ' ')) s.erase(s.begin());
            while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.pop_back();
        };
        strip(key);
        strip(val);
        kv[key] = val;
    }
    auto need = [&](const std::string& k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw InputError("checkpoint header: missing key '" + k + "'");
        return it->second;
    };
    CheckpointInfo info;
    info.config.n_layers = std::stoi(need("n_layers"));
    info.config.d_model = std::stoi(need("d_model"));
    info.config.n_heads = std::stoi(need("n_heads"));
    info.config.vocab_size = std::stoi(need("vocab_size"));
    info.config.max_seq_len = std::stoi(need("max_seq_len"));
    info.config.prefix_width = std::stoi(need("prefix_width"));
    info.plan.n_layers = info.config.n_layers;
    info.plan.ratio = std::stod(need("ratio"));
    info.plan.strategy = parse_placement(need("strategy"));
    info.init_origin = need("init");
    const std::string dtype = need("dtype");
    if (dtype == "float32") info.dtype = Dtype::f32;
    else if (dtype == "float64") info.dtype = Dtype::f64;
    else throw InputError("checkpoint header: unknown dtype '" + dtype + "'");
    const std::string& positions = need("mamba_positions");
    if (!positions.empty()) {
        std::istringstream ps(positions);
        std::string tok;
        while (std::getline(ps, tok, ',')) info.plan.mamba_positions.push_back(std::stoi(tok));
    }
    return info;
}

CheckpointInfo peek_checkpoint(const std::string& path) {
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
    return parse_checkpoint_header(header);
}

}  // namespace hybridlm
