#pragma once

// Decode throughput and cache-memory measurement. Timing is median-of-repeats
// after warmup, strictly single threaded: the harness refuses to run while
// parallel kernels are enabled, since thread scheduling would pollute the
// per-token numbers.

#include <string>
#include <vector>

#include "hybridlm/hybrid.hpp"

namespace hybridlm {

struct BenchPoint {
    int length = 0;                       // generated tokens
    double tps = 0.0;                     // tokens per second (median over repeats)
    int64_t cache_bytes = 0;              // exact cache footprint at the end of the run
    int64_t peak_resident_estimate = 0;   // params + cache + decode scratch
};

struct BenchReport {
    std::string model_tag;
    int prompt_len = 0;
    std::vector<BenchPoint> series;
};

struct ComparePoint {
    int length = 0;
    double speedup = 0.0;           // candidate tps / baseline tps
    double memory_reduction = 0.0;  // 1 - candidate cache / baseline cache
};

struct CompareSummary {
    std::string baseline_tag, candidate_tag;
    std::vector<ComparePoint> per_length;
};

BenchReport run_decode_bench(const Model<float>& model, const std::string& tag,
                             int prompt_len, std::vector<int> lengths, int repeats,
                             int warmup, uint64_t seed);

CompareSummary compare_reports(const BenchReport& baseline, const BenchReport& candidate);

void write_bench_csv(const std::string& path, const std::vector<BenchReport>& reports);
void write_bench_json(const std::string& path, const std::vector<BenchReport>& reports,
                      const CompareSummary* cmp);
// long-form table (one row per model and length) consumable by any plotter
void write_plot_data(const std::string& path, const std::vector<BenchReport>& reports,
                     const CompareSummary* cmp);

struct TrainingReport;
void write_training_report(const std::string& path, const TrainingReport& report);

struct EvalResult;
void write_eval_json(const std::string& path, const std::string& model_tag,
                     const EvalResult& result);

}  // namespace hybridlm
