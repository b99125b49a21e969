#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace lseg {

// One output sample of 1-D linear interpolation: value = (1 - frac)*in[lo] + frac*in[hi].
struct LinearTap {
    std::size_t lo;
    std::size_t hi;
    double frac;
};

// Half-pixel-center convention: output index d samples source coordinate
// s = (d + 0.5) * in/out - 0.5, clamped to [0, in - 1].
inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
    std::vector<LinearTap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    const double max_coord = static_cast<double>(in - 1);
    for (std::size_t d = 0; d < out; ++d) {
        double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, max_coord);
        const auto lo = static_cast<std::size_t>(std::floor(s));
        const std::size_t hi = std::min(lo + 1, in - 1);
        taps[d] = {lo, hi, s - static_cast<double>(lo)};
    }
    return taps;
}

// Nearest source index under the same half-pixel convention.
inline std::vector<std::size_t> nearest_taps(std::size_t in, std::size_t out) {
    std::vector<std::size_t> idx(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t d = 0; d < out; ++d) {
        const auto s = static_cast<std::size_t>(std::floor((static_cast<double>(d) + 0.5) * scale));
        idx[d] = std::min(s, in - 1);
    }
    return idx;
}

}  // namespace lseg
