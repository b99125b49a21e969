#pragma once

// Central finite-difference verification of analytic gradients. Checks run in
// double precision; long double is available for deep composites where
// double roundoff in f swamps the smallest gradient entries.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "lseg/autograd.hpp"

namespace lseg {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    std::size_t worst_tensor = 0;  // index into the checked tensors
    // Probes whose +eps or -eps evaluation took a different relu / max-pool
    // branch than the base point; their central difference spans a kink.
    std::size_t kink_crossings = 0;
};

struct GradCheckOptions {
    double eps = 1e-5;
    bool stop_at_kink = false;  // return at the first kink crossing
};

using ClosureFunction = std::function<Var<double>()>;
using ScalarFunction = std::function<Var<double>(const Var<double>&)>;

// max over every element of every tensor in vars of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
// numeric = (f(v + eps e_i) - f(v - eps e_i)) / (2 eps). Each Var must require
// grad; values are perturbed in place and restored.
template <typename T>
GradCheckResult grad_check_tensors(const std::function<Var<T>()>& f, std::vector<Var<T>> vars,
                                   const GradCheckOptions& opt = {}) {
    static_assert(std::is_floating_point_v<T> && sizeof(T) >= sizeof(double), "gradient checks need double or wider");
    for (auto& v : vars) {
        if (!v.requires_grad()) throw ShapeError("grad_check: every checked tensor must require grad");
        v.zero_grad();
    }
    std::uint64_t base_signature = 0;
    {
        BranchRecorder branches;
        const Var<T> out = f();
        base_signature = branches.signature();
        if (out.value().size() != 1) throw ShapeError("grad_check: function must return a scalar");
        if (!std::isfinite(static_cast<double>(out.value()[0]))) throw NumericError("grad_check: f is not finite");
        backward(out);
    }
    std::vector<Tensor<T>> analytic;
    for (const auto& v : vars) analytic.push_back(v.grad());

    GradCheckResult result;
    auto evaluate = [&]() {
        NoGradGuard no_grad;
        BranchRecorder branches;
        const T v = f().value()[0];
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("grad_check: f is not finite near the point");
        if (branches.signature() != base_signature) ++result.kink_crossings;
        return v;
    };

    bool first = true;
    for (std::size_t t = 0; t < vars.size(); ++t) {
        Tensor<T>& value = vars[t].mutable_value();
        const T eps = static_cast<T>(opt.eps);
        for (std::size_t i = 0; i < value.size(); ++i) {
            const T orig = value[i];
            value[i] = orig + eps;
            const T plus = evaluate();
            value[i] = orig - eps;
            const T minus = evaluate();
            value[i] = orig;
            if (opt.stop_at_kink && result.kink_crossings > 0) return result;
            const double numeric = static_cast<double>((plus - minus) / (2 * eps));
            const double a = static_cast<double>(analytic[t][i]);
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            if (first || rel > result.max_relative_error) {
                result.max_relative_error = rel;
                result.worst_index = i;
                result.analytic_at_worst = a;
                result.numeric_at_worst = numeric;
                result.worst_tensor = t;
                first = false;
            }
        }
    }
    return result;
}

inline GradCheckResult grad_check_vars(const ClosureFunction& f, std::vector<Var<double>> vars,
                                       const GradCheckOptions& opt = {}) {
    return grad_check_tensors<double>(f, std::move(vars), opt);
}

// Single-input form: the gradient of f with respect to x.
inline GradCheckResult grad_check(const ScalarFunction& f, const Tensor<double>& x, double eps = 1e-5) {
    Var<double> input(x, true);
    return grad_check_vars([&] { return f(input); }, {input}, {eps, false});
}

}  // namespace lseg
