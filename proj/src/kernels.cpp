#include "hybridlm/kernels.hpp"

#include <atomic>

namespace hybridlm::kernels {

namespace {
std::atomic<int> g_threads{1};
}

void set_threads(int n) {
    if (n < 1) throw ContractError("set_threads: thread count must be >= 1");
    g_threads.store(n, std::memory_order_relaxed);
}

int threads() { return g_threads.load(std::memory_order_relaxed); }

}  // namespace hybridlm::kernels
