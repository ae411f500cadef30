// Compares the serial reference kernels against the OpenMP variants: matmul
// and the selective scan, across sizes, with a correctness check per case.
// Usage: kernel_bench [threads]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <vector>

#include "hybridlm/kernels.hpp"
#include "hybridlm/rng.hpp"

using namespace hybridlm;
using Clock = std::chrono::steady_clock;

namespace {

double time_best_of(int reps, auto fn) {
    double best = 1e30;
    for (int i = 0; i < reps; ++i) {
        const auto t0 = Clock::now();
        fn();
        best = std::min(best, std::chrono::duration<double>(Clock::now() - t0).count());
    }
    return best;
}

void fill(std::vector<float>& v, Rng& rng) {
    for (auto& x : v) x = float(rng.normal(0.0, 1.0));
}

void bench_matmul(int threads) {
    std::printf("matmul C[m,n] = A[m,k] B[k,n]\n");
    std::printf("%8s %12s %12s %9s %10s\n", "size", "serial s", "omp s", "speedup",
                "max|diff|");
    Rng rng(1);
    for (int size : {64, 128, 256, 512, 768}) {
        std::vector<float> a(size_t(size) * size), b(size_t(size) * size);
        std::vector<float> c1(size_t(size) * size), c2(size_t(size) * size);
        fill(a, rng);
        fill(b, rng);
        kernels::set_threads(1);
        const double ts = time_best_of(3, [&] {
            kernels::mm_nn(a.data(), b.data(), c1.data(), size, size, size);
        });
        kernels::set_threads(threads);
        const double tp = time_best_of(3, [&] {
            kernels::mm_nn(a.data(), b.data(), c2.data(), size, size, size);
        });
        float diff = 0;
        for (size_t i = 0; i < c1.size(); ++i) diff = std::max(diff, std::abs(c1[i] - c2[i]));
        std::printf("%8d %12.6f %12.6f %8.2fx %10.2e\n", size, ts, tp, ts / tp, diff);
    }
}

void bench_scan(int threads) {
    std::printf("\nselective scan over [batch, n, d] lanes\n");
    std::printf("%24s %12s %12s %9s %10s\n", "batch x n x d (H)", "serial s", "omp s",
                "speedup", "max|diff|");
    Rng rng(2);
    struct Case {
        int batch, n, d, heads;
    };
    for (const Case cs : {Case{8, 256, 64, 4}, Case{16, 256, 64, 4}, Case{16, 512, 128, 8},
                          Case{32, 512, 128, 8}}) {
        kernels::ScanDims<float> dims{cs.batch, cs.n, cs.d, cs.heads};
        const size_t elems = size_t(cs.batch) * cs.n * cs.d;
        std::vector<float> xv(elems), bm(elems), cm(elems);
        std::vector<float> delta(size_t(cs.batch) * cs.n * cs.heads);
        std::vector<float> a(size_t(cs.heads), -1.0f), dsk(size_t(cs.heads), 1.0f);
        std::vector<float> y1(elems), y2(elems);
        fill(xv, rng);
        fill(bm, rng);
        fill(cm, rng);
        for (auto& v : delta) v = 0.05f;
        kernels::set_threads(1);
        const double ts = time_best_of(3, [&] {
            kernels::selective_scan_forward(dims, xv.data(), bm.data(), cm.data(),
                                            delta.data(), a.data(), dsk.data(), nullptr,
                                            y1.data(), nullptr, nullptr);
        });
        kernels::set_threads(threads);
        const double tp = time_best_of(3, [&] {
            kernels::selective_scan_forward(dims, xv.data(), bm.data(), cm.data(),
                                            delta.data(), a.data(), dsk.data(), nullptr,
                                            y2.data(), nullptr, nullptr);
        });
        float diff = 0;
        for (size_t i = 0; i < y1.size(); ++i) diff = std::max(diff, std::abs(y1[i] - y2[i]));
        std::printf("%10d x %4d x %3d (%d) %12.6f %12.6f %8.2fx %10.2e\n", cs.batch, cs.n,
                    cs.d, cs.heads, ts, tp, ts / tp, diff);
    }
}

}  // namespace

int main(int argc, char** argv) {
    int threads = argc > 1 ? std::atoi(argv[1]) : 4;
    if (threads < 2) threads = 4;
#ifndef _OPENMP
    std::printf("built without OpenMP; the parallel path falls back to serial\n");
#endif
    std::printf("comparing serial reference vs OpenMP kernels (%d threads)\n\n", threads);
    bench_matmul(threads);
    bench_scan(threads);
    kernels::set_threads(1);
    return 0;
}
