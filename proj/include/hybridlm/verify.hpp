#pragma once

// Built-in oracle suites behind the `verify` CLI subcommand: the linear
// attention equivalence, the scan vs. semiseparable-matrix cross-check, the
// attention -> Mamba-2 mapping, and float64 finite-difference gradient checks.

#include <string>
#include <vector>

namespace hybridlm {

struct VerifyResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

std::vector<VerifyResult> run_verify_suites(uint64_t seed = 1234);

}  // namespace hybridlm
