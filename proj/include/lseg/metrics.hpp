#pragma once

// Overlap scores for binary masks and the weighted cross-entropy training loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lseg/autograd.hpp"

namespace lseg {

// Binary masks and integer label maps share one storage type.
using Mask = Tensor<std::uint8_t>;

// A = truth, B = prediction.
struct ConfusionCounts {
    std::uint64_t ntp = 0;  // |A ∩ B|
    std::uint64_t nfp = 0;  // |B \ A|
    std::uint64_t nfn = 0;  // |A \ B|
    std::uint64_t ntn = 0;

    std::uint64_t truth_size() const { return ntp + nfn; }
    std::uint64_t union_size() const { return ntp + nfp + nfn; }
    std::uint64_t total() const { return ntp + nfp + nfn + ntn; }

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        ntp += o.ntp;
        nfp += o.nfp;
        nfn += o.nfn;
        ntn += o.ntn;
        return *this;
    }
};

inline ConfusionCounts confusion(const Mask& pred, const Mask& truth) {
    if (pred.shape() != truth.shape()) {
        throw ShapeError("mask shape mismatch: prediction " + to_string(pred.shape()) + " vs truth " +
                         to_string(truth.shape()));
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, t = truth[i] != 0;
        if (p && t) ++c.ntp;
        else if (p) ++c.nfp;
        else if (t) ++c.nfn;
        else ++c.ntn;
    }
    return c;
}

// |A ∩ B| / (|A| + |B \ A|). Algebraically the Jaccard index, reported under
// its own name so evaluation tables can show it next to standard Dice.
inline double paper_score(const ConfusionCounts& c) {
    const std::uint64_t denom = c.truth_size() + c.nfp;
    return denom == 0 ? 1.0 : static_cast<double>(c.ntp) / static_cast<double>(denom);
}

inline double dice_standard(const ConfusionCounts& c) {
    const std::uint64_t denom = 2 * c.ntp + c.nfp + c.nfn;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.ntp) / static_cast<double>(denom);
}

inline double jaccard(const ConfusionCounts& c) {
    const std::uint64_t denom = c.union_size();
    return denom == 0 ? 1.0 : static_cast<double>(c.ntp) / static_cast<double>(denom);
}

inline double paper_score(const Mask& pred, const Mask& truth) { return paper_score(confusion(pred, truth)); }
inline double dice_standard(const Mask& pred, const Mask& truth) { return dice_standard(confusion(pred, truth)); }
inline double jaccard(const Mask& pred, const Mask& truth) { return jaccard(confusion(pred, truth)); }

// Per-pixel argmax == lesion_class -> 1, else 0. Ties go to the lower class.
template <typename T>
Mask probs_to_mask(const Tensor<T>& probs, std::size_t lesion_class) {
    require_rank(probs.shape(), 4, "probs_to_mask input");
    const auto& s = probs.shape();
    const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
    if (lesion_class >= c) {
        throw ShapeError("probs_to_mask: lesion class " + std::to_string(lesion_class) + " out of range for " +
                         std::to_string(c) + " classes");
    }
    Mask mask({n, s[2], s[3]});
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < plane; ++i) {
            std::size_t best = 0;
            T best_v = probs[b * c * plane + i];
            for (std::size_t ch = 1; ch < c; ++ch) {
                const T v = probs[(b * c + ch) * plane + i];
                if (v > best_v) {
                    best_v = v;
                    best = ch;
                }
            }
            mask[b * plane + i] = best == lesion_class ? 1 : 0;
        }
    }
    return mask;
}

struct ClassWeights {
    std::vector<double> w;

    static ClassWeights uniform(std::size_t classes) { return {std::vector<double>(classes, 1.0)}; }

    void validate() const {
        if (w.empty()) throw ShapeError("class weights are empty");
        for (double v : w) {
            if (!(v > 0.0) || !std::isfinite(v)) throw ShapeError("class weights must be positive and finite");
        }
    }
};

// Inverse class frequency, normalized to mean 1, then clamped to [0.1, 10].
// Absent classes are counted as one pixel.
inline ClassWeights inverse_frequency_weights(const std::vector<std::uint64_t>& counts) {
    if (counts.empty()) throw ShapeError("inverse_frequency_weights: no classes");
    double total = 0.0;
    for (auto c : counts) total += static_cast<double>(std::max<std::uint64_t>(c, 1));
    std::vector<double> w(counts.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        w[i] = total / static_cast<double>(std::max<std::uint64_t>(counts[i], 1));
        mean += w[i];
    }
    mean /= static_cast<double>(w.size());
    for (auto& v : w) v = std::clamp(v / mean, 0.1, 10.0);
    return {std::move(w)};
}

// mean over pixels of -w[label] * ln(max(p[label], 1e-12)).
template <typename T>
Var<T> weighted_cross_entropy(const Var<T>& probs, const Mask& labels, const ClassWeights& weights) {
    require_rank(probs.shape(), 4, "weighted_cross_entropy probs");
    weights.validate();
    const auto& s = probs.shape();
    const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
    if (labels.shape() != Shape{n, s[2], s[3]}) {
        throw ShapeError("weighted_cross_entropy: labels " + to_string(labels.shape()) + " do not match probs " +
                         to_string(s));
    }
    if (weights.w.size() != c) throw ShapeError("weighted_cross_entropy: one weight per class required");
    constexpr double kFloor = 1e-12;
    const std::size_t count = n * plane;
    const auto& pv = probs.value();
    std::vector<std::size_t> picked(count);
    using A = Accum<T>;
    A total = 0;
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t label = labels[b * plane + i];
            if (label >= c) {
                throw ShapeError("weighted_cross_entropy: label " + std::to_string(label) + " out of range [0, " +
                                 std::to_string(c) + ")");
            }
            const std::size_t k = (b * c + label) * plane + i;
            picked[b * plane + i] = k;
            total += -static_cast<A>(weights.w[label]) * std::log(std::max<A>(pv[k], static_cast<A>(kFloor)));
        }
    }
    const T loss = static_cast<T>(total / static_cast<A>(count));
    std::vector<T> coeff(count);
    for (std::size_t j = 0; j < count; ++j) coeff[j] = static_cast<T>(static_cast<A>(weights.w[labels[j]]) / static_cast<A>(count));
    return make_result<T>(Tensor<T>({1}, std::vector<T>{loss}), {probs}, "weighted_cross_entropy",
                          [picked = std::move(picked), coeff = std::move(coeff)](Node<T>& self) {
                              auto& pp = *self.parents[0];
                              const T g = self.grad[0];
                              for (std::size_t j = 0; j < picked.size(); ++j) {
                                  const T p = pp.value[picked[j]];
                                  if (p > static_cast<T>(kFloor)) pp.grad[picked[j]] -= g * coeff[j] / p;
                              }
                          });
}

}  // namespace lseg
