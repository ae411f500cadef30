// Command-line driver: teacher training, hybrid conversion, distillation,
// evaluation, decode benchmarks, and the built-in verification suites.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "hybridlm/bench.hpp"
#include "hybridlm/checkpoint.hpp"
#include "hybridlm/config.hpp"
#include "hybridlm/distill.hpp"
#include "hybridlm/verify.hpp"

namespace fs = std::filesystem;
using namespace hybridlm;

namespace {

void ensure_dir(const std::string& dir) {
    if (!dir.empty()) fs::create_directories(dir);
}

Dataset dataset_for(const RunConfig& cfg) {
    Dataset ds = gen_task(cfg.task);
    if (cfg.task.kind == TaskKind::char_lm && cfg.model.vocab_size != ds.vocab &&
        cfg.model.vocab_size != 0)
        throw InputError("char_lm corpus vocab is " + std::to_string(ds.vocab) +
                         "; set vocab_size accordingly");
    return ds;
}

ModelConfig model_config_for(const RunConfig& cfg, const Dataset& ds) {
    ModelConfig mc = cfg.model;
    mc.vocab_size = ds.vocab;
    return mc;
}

void print_report_tail(const TrainingReport& report) {
    if (!report.steps.empty()) {
        const auto& s = report.steps.back();
        std::printf("final step %d: L_layer=%.4f L_prob=%.4f L_ce=%.4f total=%.4f\n", s.step,
                    s.l_layer, s.l_prob, s.l_ce, s.total);
    }
    std::printf("eval CE %.4f, accuracy %.4f, wall clock %.1fs\n", report.final_eval_ce,
                report.final_eval_accuracy, report.wall_clock_s);
}

int cmd_train_teacher(const std::string& config_path, std::string out,
                      std::string report_path) {
    RunConfig cfg = load_config_file(config_path);
    Dataset ds = dataset_for(cfg);
    ModelConfig mc = model_config_for(cfg, ds);
    Rng rng(cfg.distill.seed);
    auto model = build_teacher<float>(mc, rng);
    std::printf("training teacher: %d layers, d=%d, vocab=%d, %d steps\n", mc.n_layers,
                mc.d_model, mc.vocab_size, cfg.distill.total_steps);
    TrainingReport report = train_lm(model, ds, cfg.distill);
    ensure_dir(cfg.out_dir);
    if (out.empty()) out = cfg.out_dir + "/teacher.ckpt";
    if (report_path.empty()) report_path = cfg.out_dir + "/teacher_report.jsonl";
    save_checkpoint(out, model);
    write_training_report(report_path, report);
    print_report_tail(report);
    std::printf("wrote %s\n", out.c_str());
    return 0;
}

int cmd_convert(const std::string& teacher_path, double ratio, const std::string& strategy,
                const std::string& init, uint64_t seed, const std::string& out) {
    auto teacher = load_checkpoint<float>(teacher_path);
    LayerPlan plan = ratio == 0.0
                         ? LayerPlan::none(teacher.config.n_layers)
                         : plan_placement(teacher.config.n_layers, ratio,
                                          parse_placement(strategy));
    Rng rng(seed);
    auto student = convert_model(teacher, plan, parse_init_kind(init), rng);
    save_checkpoint(out, student);
    std::printf("converted %d/%d layers to mamba-2 (", plan.m(), teacher.config.n_layers);
    for (size_t i = 0; i < plan.mamba_positions.size(); ++i)
        std::printf("%s%d", i ? "," : "", plan.mamba_positions[i]);
    std::printf(") init=%s\nwrote %s\n", init.c_str(), out.c_str());
    return 0;
}

int cmd_distill(const std::string& teacher_path, const std::string& student_path,
                const std::string& config_path, std::string out, std::string report_path) {
    RunConfig cfg = load_config_file(config_path);
    auto teacher = load_checkpoint<float>(teacher_path);
    auto student = load_checkpoint<float>(student_path);
    Dataset ds = dataset_for(cfg);
    if (ds.vocab != teacher.config.vocab_size)
        throw InputError("config task vocab does not match the teacher checkpoint");
    std::printf("distilling: %d steps, alpha=%g beta=%g gamma=%g T=%g\n",
                cfg.distill.total_steps, cfg.distill.alpha, cfg.distill.beta,
                cfg.distill.gamma, cfg.distill.temperature);
    TrainingReport report = distill_run(teacher, student, ds, cfg.distill);
    ensure_dir(cfg.out_dir);
    if (out.empty()) out = cfg.out_dir + "/student_distilled.ckpt";
    if (report_path.empty()) report_path = cfg.out_dir + "/distill_report.jsonl";
    save_checkpoint(out, student);
    write_training_report(report_path, report);
    print_report_tail(report);
    std::printf("wrote %s and %s\n", out.c_str(), report_path.c_str());
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& config_path,
             const std::string& out) {
    RunConfig cfg = load_config_file(config_path);
    auto model = load_checkpoint<float>(model_path);
    Dataset ds = dataset_for(cfg);
    if (ds.vocab != model.config.vocab_size)
        throw InputError("config task vocab does not match the model checkpoint");
    EvalResult res = evaluate_model(model, ds);
    std::printf("{\"model\": \"%s\", \"eval_ce\": %s, \"accuracy\": %s}\n",
                model_path.c_str(), format_double(res.ce).c_str(),
                format_double(res.accuracy).c_str());
    if (!out.empty()) write_eval_json(out, model_path, res);
    return 0;
}

int cmd_bench(const std::string& model_path, const std::string& baseline_path,
              std::vector<int> lengths, int prompt_len, int repeats, int warmup,
              uint64_t seed, const std::string& out_prefix) {
    auto model = load_checkpoint<float>(model_path);
    auto report = run_decode_bench(model, fs::path(model_path).stem().string(), prompt_len,
                                   lengths, repeats, warmup, seed);
    std::vector<BenchReport> reports{report};
    CompareSummary cmp;
    bool have_cmp = false;
    if (!baseline_path.empty()) {
        auto baseline = load_checkpoint<float>(baseline_path);
        auto base_report = run_decode_bench(baseline, fs::path(baseline_path).stem().string(),
                                            prompt_len, lengths, repeats, warmup, seed);
        cmp = compare_reports(base_report, report);
        reports.insert(reports.begin(), base_report);
        have_cmp = true;
    }
    for (const auto& r : reports) {
        std::printf("%s (prompt %d):\n", r.model_tag.c_str(), r.prompt_len);
        for (const auto& pt : r.series)
            std::printf("  length %5d: %10.1f tok/s, cache %10lld bytes\n", pt.length, pt.tps,
                        (long long)pt.cache_bytes);
    }
    if (have_cmp)
        for (const auto& pt : cmp.per_length)
            std::printf("length %5d: speedup %.3fx, memory reduction %.3f\n", pt.length,
                        pt.speedup, pt.memory_reduction);
    const fs::path prefix(out_prefix);
    if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
    write_bench_csv(out_prefix + ".csv", reports);
    write_bench_json(out_prefix + ".json", reports, have_cmp ? &cmp : nullptr);
    write_plot_data(out_prefix + "_plot.tsv", reports, have_cmp ? &cmp : nullptr);
    std::printf("wrote %s.csv, %s.json, %s_plot.tsv\n", out_prefix.c_str(),
                out_prefix.c_str(), out_prefix.c_str());
    return 0;
}

int cmd_verify(uint64_t seed) {
    bool all_pass = true;
    for (const auto& res : run_verify_suites(seed)) {
        std::printf("[%s] %s: %s\n", res.pass ? "PASS" : "FAIL", res.name.c_str(),
                    res.detail.c_str());
        all_pass = all_pass && res.pass;
    }
    if (!all_pass) throw ContractError("verification suites failed");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hybridlm: attention/Mamba-2 hybrid distillation lab"};
    app.require_subcommand(1);

    int threads = 1;
    app.add_option("--threads", threads, "kernel thread count (1 = serial, deterministic)");

    std::string config_path, teacher_path, student_path, model_path, baseline_path;
    std::string out_path, report_path, strategy = "evenly", init = "transfer";
    std::string out_prefix = "bench";
    double ratio = 0.25;
    uint64_t seed = 1;
    std::vector<int> lengths{128, 512, 2048, 4096};
    int prompt_len = 16, repeats = 5, warmup = 2;

    auto* train = app.add_subcommand("train-teacher", "train the transformer teacher");
    train->add_option("--config", config_path, "run config file")->required();
    train->add_option("--out", out_path, "checkpoint output path");
    train->add_option("--report", report_path, "training report output path");

    auto* convert = app.add_subcommand("convert", "convert attention layers to mamba-2");
    convert->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    convert->add_option("--ratio", ratio, "fraction of layers to replace")->required();
    convert->add_option("--strategy", strategy, "evenly|beginning|middle|end");
    convert->add_option("--init", init, "transfer|random");
    convert->add_option("--seed", seed, "seed for the dt/A/D draws");
    convert->add_option("--out", out_path, "student checkpoint output")->required();

    auto* distill = app.add_subcommand("distill", "single-stage distillation run");
    distill->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    distill->add_option("--student", student_path, "student checkpoint")->required();
    distill->add_option("--config", config_path, "run config file")->required();
    distill->add_option("--out", out_path, "distilled student checkpoint output");
    distill->add_option("--report", report_path, "training report output path");

    auto* eval = app.add_subcommand("eval", "evaluate CE and task accuracy");
    eval->add_option("--model", model_path, "model checkpoint")->required();
    eval->add_option("--config", config_path, "run config file (task definition)")->required();
    eval->add_option("--out", out_path, "optional JSON output path");

    auto* bench = app.add_subcommand("bench", "decode throughput and cache benchmark");
    bench->add_option("--model", model_path, "model checkpoint")->required();
    bench->add_option("--baseline", baseline_path, "baseline checkpoint to compare against");
    bench->add_option("--lengths", lengths, "generated lengths")->delimiter(',');
    bench->add_option("--prompt-len", prompt_len, "prompt length");
    bench->add_option("--repeats", repeats, "timed repeats per length (>= 3)");
    bench->add_option("--warmup", warmup, "warmup runs per length");
    bench->add_option("--seed", seed, "prompt seed");
    bench->add_option("--out-prefix", out_prefix, "output file prefix");

    auto* verify = app.add_subcommand("verify", "run the built-in oracle suites");
    verify->add_option("--seed", seed, "random seed for the suites");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (std::getenv("HYBRIDLM_DETERMINISTIC")) threads = 1;
        kernels::set_threads(threads);
        if (train->parsed()) return cmd_train_teacher(config_path, out_path, report_path);
        if (convert->parsed())
            return cmd_convert(teacher_path, ratio, strategy, init, seed, out_path);
        if (distill->parsed())
            return cmd_distill(teacher_path, student_path, config_path, out_path, report_path);
        if (eval->parsed()) return cmd_eval(model_path, config_path, out_path);
        if (bench->parsed())
            return cmd_bench(model_path, baseline_path, lengths, prompt_len, repeats, warmup,
                             seed, out_prefix);
        if (verify->parsed()) return cmd_verify(seed);
    } catch (const InputError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
