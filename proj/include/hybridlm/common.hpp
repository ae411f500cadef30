#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hybridlm {

// Contract violations (bad shapes, broken invariants, non-finite values).
// CLI maps these to exit code 1.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed user input (config files, CLI arguments, unreadable files).
// CLI maps these to exit code 2.
struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimError : ContractError {
    explicit DimError(const std::string& msg) : ContractError(msg) {}
};

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr Dtype dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "tensors support float32 and float64 only");
    if constexpr (std::is_same_v<T, float>) return Dtype::f32;
    else return Dtype::f64;
}

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "float32" : "float64"; }

}  // namespace hybridlm
