#include "hybridlm/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "hybridlm/config.hpp"
#include "hybridlm/distill.hpp"

namespace hybridlm {

namespace {

using Clock = std::chrono::steady_clock;

int64_t decode_scratch_bytes(const ModelConfig& cfg) {
    // the reusable buffers held by GenCache (x, xn, mix, tmp1, tmp2, hidden,
    // scores, logits), sized for one decode step
    const int64_t d = cfg.d_model;
    return int64_t(sizeof(float)) *
           (5 * d + cfg.mlp_hidden() + std::max(int64_t(cfg.max_seq_len), d) +
            cfg.vocab_size);
}

template <typename T>
int64_t param_bytes(const Model<T>& m) {
    auto& mut = const_cast<Model<T>&>(m);
    return parameter_count(mut) * int64_t(sizeof(T));
}

}  // namespace

BenchReport run_decode_bench(const Model<float>& model, const std::string& tag,
                             int prompt_len, std::vector<int> lengths, int repeats,
                             int warmup, uint64_t seed) {
    if (kernels::parallel_enabled())
        throw ContractError(
            "run_decode_bench: parallel kernels are enabled; benchmarks must run single "
            "threaded (set threads to 1)");
    if (lengths.empty()) throw ContractError("run_decode_bench: lengths must be nonempty");
    if (repeats < 3) throw ContractError("run_decode_bench: repeats must be >= 3");
    if (prompt_len < 1) throw ContractError("run_decode_bench: prompt_len must be >= 1");
    for (size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1])
            throw ContractError("run_decode_bench: lengths must be strictly increasing");
    const int max_needed = prompt_len + lengths.back();
    if (max_needed > model.config.max_seq_len)
        throw ContractError("run_decode_bench: prompt+length " + std::to_string(max_needed) +
                            " exceeds model max_seq_len " +
                            std::to_string(model.config.max_seq_len));

    Rng rng = Rng(seed).stream("bench.prompt");
    std::vector<int32_t> prompt(size_t(prompt_len), 0);
    for (auto& t : prompt) t = int32_t(rng.below(model.config.vocab_size));

    BenchReport report;
    report.model_tag = tag;
    report.prompt_len = prompt_len;
    for (int length : lengths) {
        std::vector<int32_t> reference;
        std::vector<double> times;
        int64_t cache_bytes = 0;
        for (int run = 0; run < warmup + repeats; ++run) {
            GenCache<float> cache = make_cache(model, prompt_len + length);
            const auto t0 = Clock::now();
            auto tokens = generate(model, prompt, length, cache);
            const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
            if (run == 0) {
                reference = tokens;
            } else if (tokens != reference) {
                throw ContractError("run_decode_bench: nondeterministic decode output");
            }
            cache_bytes = cache.bytes();
            if (run >= warmup) {
                times.push_back(secs);
                if (secs < 0.010)
                    std::fprintf(stderr,
                                 "[bench] warning: run for length %d took %.3f ms (< 10 ms); "
                                 "timer resolution may dominate, increase the length\n",
                                 length, secs * 1e3);
            }
        }
        std::sort(times.begin(), times.end());
        const double median = times[times.size() / 2];
        BenchPoint pt;
        pt.length = length;
        pt.tps = double(length) / median;
        pt.cache_bytes = cache_bytes;
        pt.peak_resident_estimate =
            param_bytes(model) + cache_bytes + decode_scratch_bytes(model.config);
        report.series.push_back(pt);
    }
    return report;
}

CompareSummary compare_reports(const BenchReport& baseline, const BenchReport& candidate) {
    if (baseline.series.size() != candidate.series.size())
        throw ContractError("compare_reports: reports cover different lengths");
    CompareSummary cmp;
    cmp.baseline_tag = baseline.model_tag;
    cmp.candidate_tag = candidate.model_tag;
    for (size_t i = 0; i < baseline.series.size(); ++i) {
        const auto& b = baseline.series[i];
        const auto& c = candidate.series[i];
        if (b.length != c.length)
            throw ContractError("compare_reports: length mismatch at index " +
                                std::to_string(i));
        ComparePoint pt;
        pt.length = b.length;
        pt.speedup = c.tps / b.tps;
        pt.memory_reduction = 1.0 - double(c.cache_bytes) / double(b.cache_bytes);
        cmp.per_length.push_back(pt);
    }
    return cmp;
}

void write_bench_csv(const std::string& path, const std::vector<BenchReport>& reports) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << "model,length,tps,cache_bytes\n";
    for (const auto& r : reports)
        for (const auto& pt : r.series)
            out << r.model_tag << "," << pt.length << "," << format_double(pt.tps) << ","
                << pt.cache_bytes << "\n";
}

void write_bench_json(const std::string& path, const std::vector<BenchReport>& reports,
                      const CompareSummary* cmp) {
    nlohmann::json j;
    j["reports"] = nlohmann::json::array();
    for (const auto& r : reports) {
        nlohmann::json jr;
        jr["model"] = r.model_tag;
        jr["prompt_len"] = r.prompt_len;
        jr["series"] = nlohmann::json::array();
        for (const auto& pt : r.series)
            jr["series"].push_back({{"length", pt.length},
                                    {"tps", pt.tps},
                                    {"cache_bytes", pt.cache_bytes},
                                    {"peak_resident_estimate", pt.peak_resident_estimate}});
        j["reports"].push_back(jr);
    }
    if (cmp) {
        nlohmann::json jc;
        jc["baseline"] = cmp->baseline_tag;
        jc["candidate"] = cmp->candidate_tag;
        jc["per_length"] = nlohmann::json::array();
        for (const auto& pt : cmp->per_length)
            jc["per_length"].push_back({{"length", pt.length},
                                        {"speedup", pt.speedup},
                                        {"memory_reduction", pt.memory_reduction}});
        j["compare"] = jc;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

void write_plot_data(const std::string& path, const std::vector<BenchReport>& reports,
                     const CompareSummary* cmp) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << "model\tlength\ttps\tcache_bytes\tspeedup\tmemory_reduction\n";
    for (const auto& r : reports) {
        for (const auto& pt : r.series) {
            out << r.model_tag << "\t" << pt.length << "\t" << format_double(pt.tps) << "\t"
                << pt.cache_bytes;
            const ComparePoint* match = nullptr;
            if (cmp && r.model_tag == cmp->candidate_tag)
                for (const auto& cp : cmp->per_length)
                    if (cp.length == pt.length) match = &cp;
            if (match)
                out << "\t" << format_double(match->speedup) << "\t"
                    << format_double(match->memory_reduction) << "\n";
            else
                out << "\t\t\n";
        }
    }
}

void write_training_report(const std::string& path, const TrainingReport& report) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path + "'");
    for (const auto& s : report.steps) {
        nlohmann::json j{{"step", s.step},   {"lr", s.lr},     {"L_layer", s.l_layer},
                         {"L_prob", s.l_prob}, {"L_ce", s.l_ce}, {"total", s.total}};
        out << j.dump() << "\n";
    }
    nlohmann::json summary;
    summary["summary"] = true;
    summary["final_eval_ce"] = report.final_eval_ce;
    summary["final_eval_accuracy"] = report.final_eval_accuracy;
    summary["wall_clock_s"] = report.wall_clock_s;
    summary["eval_ce_series"] = nlohmann::json::array();
    for (const auto& e : report.evals)
        summary["eval_ce_series"].push_back({{"step", e.step}, {"eval_ce", e.eval_ce}});
    out << summary.dump() << "\n";
}

void write_eval_json(const std::string& path, const std::string& model_tag,
                     const EvalResult& result) {
    nlohmann::json j{{"model", model_tag}, {"eval_ce", result.ce},
                     {"accuracy", result.accuracy}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

}  // namespace hybridlm
