#pragma once

// Adam with bias correction, and global-norm gradient clipping.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lseg/autograd.hpp"

namespace lseg {

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    AdamConfig config;
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::uint64_t t = 0;

    AdamState() = default;
    explicit AdamState(AdamConfig c) : config(c) {}
};

// One step over params (gradients read from each Var). names, when given,
// label parameters in diagnostics. A non-finite gradient aborts before any
// parameter or moment is touched.
template <typename T>
void adam_step(std::vector<Var<T>>& params, AdamState<T>& state, const std::vector<std::string>* names = nullptr) {
    auto label = [&](std::size_t i) {
        return names && i < names->size() ? (*names)[i] : "parameter #" + std::to_string(i);
    };
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.push_back(zeros_like(p.value()));
            state.v.push_back(zeros_like(p.value()));
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter count changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].shape() != params[i].shape()) {
            throw ShapeError("adam_step: shape of " + label(i) + " changed between steps");
        }
        for (T g : params[i].grad().data()) {
            if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in " + label(i));
        }
    }

    ++state.t;
    const AdamConfig& c = state.config;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
    const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
    const T lr = static_cast<T>(c.lr), eps = static_cast<T>(c.eps);
    const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto theta = params[i].mutable_value().data();
        const auto g = params[i].grad().data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        for (std::size_t j = 0; j < theta.size(); ++j) {
            m[j] = b1 * m[j] + (T{1} - b1) * g[j];
            v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
            const T m_hat = m[j] * inv_bc1;
            const T v_hat = v[j] * inv_bc2;
            theta[j] -= lr * (m_hat / (std::sqrt(v_hat) + eps));
        }
    }
}

// Scales all gradients so their joint L2 norm is at most max_norm. Returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<Var<T>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (T g : p.grad().data()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (std::isfinite(norm) && norm > max_norm) {
        const T factor = static_cast<T>(max_norm / norm);
        for (auto& p : params) {
            for (T& g : p.mutable_grad().data()) g *= factor;
        }
    }
    return norm;
}

}  // namespace lseg
