#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hybridlm/common.hpp"

namespace hybridlm {

enum class Placement { evenly, beginning, middle, end };

inline const char* placement_name(Placement p) {
    switch (p) {
        case Placement::evenly: return "evenly";
        case Placement::beginning: return "beginning";
        case Placement::middle: return "middle";
        case Placement::end: return "end";
    }
    return "evenly";
}

inline Placement parse_placement(const std::string& s) {
    if (s == "evenly") return Placement::evenly;
    if (s == "beginning") return Placement::beginning;
    if (s == "middle") return Placement::middle;
    if (s == "end") return Placement::end;
    throw InputError("unknown placement strategy '" + s + "'");
}

// Which decoder layers carry a Mamba-2 mixer instead of attention.
struct LayerPlan {
    int n_layers = 0;
    std::vector<int> mamba_positions;  // sorted, 0-based
    Placement strategy = Placement::evenly;
    double ratio = 0.0;

    int m() const { return int(mamba_positions.size()); }
    bool is_mamba(int layer) const {
        return std::binary_search(mamba_positions.begin(), mamba_positions.end(), layer);
    }
    static LayerPlan none(int n_layers) { return LayerPlan{n_layers, {}, Placement::evenly, 0.0}; }
};

// m = round(ratio * L), clamped to at least 1 for positive ratio.
// evenly: l_i = floor((i + 0.5) * L / m), which keeps consecutive gaps within
// one of each other and avoids pinning a layer at position 0.
inline LayerPlan plan_placement(int n_layers, double ratio, Placement strategy) {
    if (n_layers < 1) throw ContractError("plan_placement: n_layers must be >= 1");
    if (ratio <= 0.0 || ratio > 1.0)
        throw ContractError("plan_placement: ratio must be in (0, 1]");
    int m = int(std::llround(ratio * n_layers));
    if (m < 1) m = 1;
    if (m > n_layers) m = n_layers;

    LayerPlan plan{n_layers, {}, strategy, ratio};
    plan.mamba_positions.reserve(size_t(m));
    switch (strategy) {
        case Placement::evenly:
            for (int i = 0; i < m; ++i)
                plan.mamba_positions.push_back(
                    int((2 * int64_t(i) + 1) * n_layers / (2 * int64_t(m))));
            break;
        case Placement::beginning:
            for (int i = 0; i < m; ++i) plan.mamba_positions.push_back(i);
            break;
        case Placement::middle: {
            const int start = (n_layers - m) / 2;
            for (int i = 0; i < m; ++i) plan.mamba_positions.push_back(start + i);
            break;
        }
        case Placement::end:
            for (int i = 0; i < m; ++i) plan.mamba_positions.push_back(n_layers - m + i);
            break;
    }
    // evenly-spaced indices from the formula are already strictly increasing
    for (size_t i = 1; i < plan.mamba_positions.size(); ++i)
        if (plan.mamba_positions[i] <= plan.mamba_positions[i - 1])
            throw ContractError("plan_placement: positions not strictly increasing");
    return plan;
}

}  // namespace hybridlm
