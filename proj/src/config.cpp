#include "hybridlm/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace hybridlm {

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

struct KeyValues {
    std::map<std::string, std::string> kv;

    bool has(const std::string& k) const { return kv.count(k) > 0; }

    const std::string& get(const std::string& k) const { return kv.at(k); }

    int get_int(const std::string& k, int fallback) const {
        if (!has(k)) return fallback;
        try {
            size_t pos = 0;
            int v = std::stoi(get(k), &pos);
            if (pos != get(k).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw InputError("config: key '" + k + "' expects an integer, got '" + get(k) +
                             "'");
        }
    }

    uint64_t get_u64(const std::string& k, uint64_t fallback) const {
        if (!has(k)) return fallback;
        try {
            size_t pos = 0;
            uint64_t v = std::stoull(get(k), &pos);
            if (pos != get(k).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw InputError("config: key '" + k + "' expects an unsigned integer");
        }
    }

    double get_double(const std::string& k, double fallback) const {
        if (!has(k)) return fallback;
        try {
            size_t pos = 0;
            double v = std::stod(get(k), &pos);
            if (pos != get(k).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw InputError("config: key '" + k + "' expects a number, got '" + get(k) + "'");
        }
    }

    bool get_bool(const std::string& k, bool fallback) const {
        if (!has(k)) return fallback;
        const std::string& v = get(k);
        if (v == "true") return true;
        if (v == "false") return false;
        throw InputError("config: key '" + k + "' expects true|false");
    }

    std::string get_str(const std::string& k, const std::string& fallback) const {
        return has(k) ? get(k) : fallback;
    }
};

const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        "task",        "vocab_size",   "seq_len",     "n_train",      "n_eval",
        "prefix_count", "prefix_width", "n_layers",    "d_model",      "n_heads",
        "max_seq_len", "ratio",        "strategy",    "init",         "alpha",
        "beta",        "gamma",        "temperature", "layer_loss_squared",
        "lr_peak",     "warmup_frac",  "decay_frac",  "weight_decay", "adam_beta1",
        "adam_beta2",  "batch_size",   "total_steps", "eval_every",   "seed",
        "out_dir"};
    return keys;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    distill.validate();
    if (ratio < 0.0 || ratio > 1.0) throw InputError("config: ratio must be in [0, 1]");
    if (init != "transfer" && init != "random")
        throw InputError("config: init must be transfer|random");
    if (task.kind != TaskKind::char_lm && task.vocab_size != model.vocab_size)
        throw InputError("config: vocab_size drives both task and model; got conflicting use");
    if (task.prefix_width != model.prefix_width)
        throw InputError("config: prefix_width mismatch between task and model");
}

RunConfig parse_config_text(const std::string& text) {
    KeyValues kvs;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw InputError("config line " + std::to_string(lineno) +
                             ": expected 'key = value'");
        const std::string key = trim(t.substr(0, eq));
        const std::string val = trim(t.substr(eq + 1));
        const auto& known = known_keys();
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw InputError("config line " + std::to_string(lineno) + ": unknown key '" +
                             key + "'");
        if (kvs.kv.count(key))
            throw InputError("config line " + std::to_string(lineno) + ": duplicate key '" +
                             key + "'");
        kvs.kv[key] = val;
    }

    RunConfig cfg;
    cfg.task.kind = parse_task(kvs.get_str("task", "copy"));
    cfg.task.vocab_size = kvs.get_int("vocab_size", cfg.task.vocab_size);
    cfg.task.seq_len = kvs.get_int("seq_len", cfg.task.seq_len);
    cfg.task.n_train = kvs.get_int("n_train", cfg.task.n_train);
    cfg.task.n_eval = kvs.get_int("n_eval", cfg.task.n_eval);
    cfg.task.prefix_count = kvs.get_int("prefix_count", 0);
    cfg.task.prefix_width = kvs.get_int("prefix_width", 0);

    cfg.model.n_layers = kvs.get_int("n_layers", cfg.model.n_layers);
    cfg.model.d_model = kvs.get_int("d_model", cfg.model.d_model);
    cfg.model.n_heads = kvs.get_int("n_heads", cfg.model.n_heads);
    cfg.model.vocab_size = cfg.task.vocab_size;
    cfg.model.max_seq_len = kvs.get_int("max_seq_len", cfg.model.max_seq_len);
    cfg.model.prefix_width = cfg.task.prefix_width;

    cfg.ratio = kvs.get_double("ratio", cfg.ratio);
    cfg.strategy = parse_placement(kvs.get_str("strategy", "evenly"));
    cfg.init = kvs.get_str("init", cfg.init);

    cfg.distill.alpha = kvs.get_double("alpha", cfg.distill.alpha);
    cfg.distill.beta = kvs.get_double("beta", cfg.distill.beta);
    cfg.distill.gamma = kvs.get_double("gamma", cfg.distill.gamma);
    cfg.distill.temperature = kvs.get_double("temperature", cfg.distill.temperature);
    cfg.distill.layer_loss_squared = kvs.get_bool("layer_loss_squared", false);
    cfg.distill.lr_peak = kvs.get_double("lr_peak", cfg.distill.lr_peak);
    cfg.distill.warmup_frac = kvs.get_double("warmup_frac", cfg.distill.warmup_frac);
    cfg.distill.decay_frac = kvs.get_double("decay_frac", cfg.distill.decay_frac);
    cfg.distill.weight_decay = kvs.get_double("weight_decay", cfg.distill.weight_decay);
    cfg.distill.adam_beta1 = kvs.get_double("adam_beta1", cfg.distill.adam_beta1);
    cfg.distill.adam_beta2 = kvs.get_double("adam_beta2", cfg.distill.adam_beta2);
    cfg.distill.batch_size = kvs.get_int("batch_size", cfg.distill.batch_size);
    cfg.distill.total_steps = kvs.get_int("total_steps", cfg.distill.total_steps);
    cfg.distill.eval_every = kvs.get_int("eval_every", cfg.distill.eval_every);
    cfg.distill.seed = kvs.get_u64("seed", cfg.distill.seed);
    cfg.task.seed = cfg.distill.seed;

    cfg.out_dir = kvs.get_str("out_dir", cfg.out_dir);
    cfg.validate();
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string canonical_config_text(const RunConfig& cfg) {
    std::ostringstream out;
    out << "task = " << task_name(cfg.task.kind) << "\n";
    out << "vocab_size = " << cfg.task.vocab_size << "\n";
    out << "seq_len = " << cfg.task.seq_len << "\n";
    out << "n_train = " << cfg.task.n_train << "\n";
    out << "n_eval = " << cfg.task.n_eval << "\n";
    out << "prefix_count = " << cfg.task.prefix_count << "\n";
    out << "prefix_width = " << cfg.task.prefix_width << "\n";
    out << "n_layers = " << cfg.model.n_layers << "\n";
    out << "d_model = " << cfg.model.d_model << "\n";
    out << "n_heads = " << cfg.model.n_heads << "\n";
    out << "max_seq_len = " << cfg.model.max_seq_len << "\n";
    out << "ratio = " << format_double(cfg.ratio) << "\n";
    out << "strategy = " << placement_name(cfg.strategy) << "\n";
    out << "init = " << cfg.init << "\n";
    out << "alpha = " << format_double(cfg.distill.alpha) << "\n";
    out << "beta = " << format_double(cfg.distill.beta) << "\n";
    out << "gamma = " << format_double(cfg.distill.gamma) << "\n";
    out << "temperature = " << format_double(cfg.distill.temperature) << "\n";
    out << "layer_loss_squared = " << (cfg.distill.layer_loss_squared ? "true" : "false")
        << "\n";
    out << "lr_peak = " << format_double(cfg.distill.lr_peak) << "\n";
    out << "warmup_frac = " << format_double(cfg.distill.warmup_frac) << "\n";
    out << "decay_frac = " << format_double(cfg.distill.decay_frac) << "\n";
    out << "weight_decay = " << format_double(cfg.distill.weight_decay) << "\n";
    out << "adam_beta1 = " << format_double(cfg.distill.adam_beta1) << "\n";
    out << "adam_beta2 = " << format_double(cfg.distill.adam_beta2) << "\n";
    out << "batch_size = " << cfg.distill.batch_size << "\n";
    out << "total_steps = " << cfg.distill.total_steps << "\n";
    out << "eval_every = " << cfg.distill.eval_every << "\n";
    out << "seed = " << cfg.distill.seed << "\n";
    out << "out_dir = " << cfg.out_dir << "\n";
    return out.str();
}

void write_config_file(const std::string& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write config file '" + path + "'");
    out << canonical_config_text(cfg);
}

}  // namespace hybridlm
