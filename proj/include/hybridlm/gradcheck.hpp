#pragma once

// Central finite-difference gradient checks. The checker only ever calls the
// loss function forward, so it stays independent of the backward
// implementation it validates.

#include <functional>
#include <string>

#include "hybridlm/model.hpp"

namespace hybridlm {

struct GradCheckResult {
    double max_err = 0.0;     // |fd - analytic| / (|fd| + |analytic| + floor)
    std::string worst;        // parameter element where it occurred
    int64_t checked = 0;

    bool ok(double tol) const { return checked > 0 && max_err < tol; }
};

// loss_fn() must rebuild its graph from the current parameter values and
// return a scalar. The default step keeps truncation error negligible even
// near high-curvature points (e.g. the sqrt in the layer loss); float64
// roundoff at h = 1e-6 is still orders of magnitude below the tolerances.
template <typename T, typename LossFn>
GradCheckResult finite_difference_check(std::vector<Parameter<T>> params, LossFn loss_fn,
                                        T h = T(1e-6), double floor_ = 1e-3) {
    for (auto& p : params) p.tensor.zero_grad();
    Tensor<T> loss = loss_fn();
    loss.backward();

    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        if (!p.tensor.requires_grad())
            throw ContractError("finite_difference_check: parameter " + p.name +
                                " does not require grad");
        auto g = p.tensor.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(size_t(p.tensor.numel()), T(0));
    }

    GradCheckResult res;
    NoGradGuard ng;  // FD evaluations need values only
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto vals = params[pi].tensor.raw();
        for (int64_t i = 0; i < int64_t(vals.size()); ++i) {
            const T orig = vals[size_t(i)];
            vals[size_t(i)] = orig + h;
            const double f_plus = double(loss_fn().item());
            vals[size_t(i)] = orig - h;
            const double f_minus = double(loss_fn().item());
            vals[size_t(i)] = orig;
            const double fd = (f_plus - f_minus) / (2.0 * double(h));
            const double an = double(analytic[pi][size_t(i)]);
            const double err = std::abs(fd - an) / (std::abs(fd) + std::abs(an) + floor_);
            ++res.checked;
            if (err > res.max_err) {
                res.max_err = err;
                res.worst = params[pi].name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

}  // namespace hybridlm
