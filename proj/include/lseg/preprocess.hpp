#pragma once

// CT slice preprocessing (Hounsfield windowing, histogram equalization,
// resizing) and training-time augmentation (rotation, zoom + elastic
// deformation). Images are [H, W] float tensors, masks [H, W] label maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "lseg/interp.hpp"
#include "lseg/metrics.hpp"
#include "lseg/rng.hpp"
#include "lseg/tensor.hpp"

namespace lseg {

using Image = Tensor<float>;

struct WindowSpec {
    double low = -100.0;
    double high = 200.0;

    void validate() const {
        if (!(low < high)) throw ConfigError("window low must be below window high");
    }
};

struct AugmentSpec {
    double max_rotation_degrees = 180.0;
    double zoom_factor = 0.2;  // scale drawn from [1 - zoom, 1 + zoom]
    double elastic_alpha = 10.0;
    double elastic_sigma = 4.0;

    void validate() const {
        if (!(max_rotation_degrees >= 0.0 && max_rotation_degrees <= 180.0)) {
            throw ConfigError("max rotation must be in [0, 180] degrees");
        }
        if (!(zoom_factor >= 0.0 && zoom_factor < 1.0)) throw ConfigError("zoom factor must be in [0, 1)");
        if (elastic_alpha < 0.0 || elastic_sigma < 0.0) throw ConfigError("elastic parameters must be nonnegative");
    }
};

// Clamp to [low, high], then map affinely onto [0, 1].
template <typename T>
Tensor<T> window_hu(const Tensor<T>& hu, const WindowSpec& w) {
    w.validate();
    Tensor<T> out = hu;
    const double width = w.high - w.low;
    for (auto& v : out.data()) {
        const double c = std::clamp(static_cast<double>(v), w.low, w.high);
        v = static_cast<T>((c - w.low) / width);
    }
    return out;
}

// Histogram equalization of values in [0, 1]. Values are quantized to `bins`
// levels (round half up); level v maps to
//   round_half_up((cdf(v) - cdf_min) / (N - cdf_min) * (bins - 1))
// and the result is rescaled to [0, 1]. A single occupied level (constant
// image) leaves the input unchanged.
inline Image histogram_equalize(const Image& x, std::size_t bins = 256) {
    if (bins < 2) throw ConfigError("histogram equalization needs at least 2 bins");
    const double top = static_cast<double>(bins - 1);
    std::vector<std::size_t> level(x.size());
    std::vector<std::uint64_t> hist(bins, 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = std::clamp(static_cast<double>(x[i]), 0.0, 1.0);
        level[i] = std::min(bins - 1, static_cast<std::size_t>(std::floor(v * top + 0.5)));
        ++hist[level[i]];
    }
    std::vector<std::uint64_t> cdf(bins);
    std::uint64_t run = 0, cdf_min = 0;
    for (std::size_t b = 0; b < bins; ++b) {
        run += hist[b];
        cdf[b] = run;
        if (cdf_min == 0 && run > 0) cdf_min = run;
    }
    const std::uint64_t n = x.size();
    if (n == 0 || n == cdf_min) return x;
    std::vector<float> lut(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        const double cd = cdf[b] >= cdf_min ? static_cast<double>(cdf[b] - cdf_min) : 0.0;
        const double mapped = std::floor(cd / static_cast<double>(n - cdf_min) * top + 0.5);
        lut[b] = static_cast<float>(mapped / top);
    }
    Image out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = lut[level[i]];
    return out;
}

// Bilinear resize with the half-pixel convention used by the upsampling layer.
inline Image resize_bilinear(const Image& x, std::size_t out_h, std::size_t out_w) {
    require_rank(x.shape(), 2, "resize_bilinear input");
    const std::size_t h = x.dim(0), w = x.dim(1);
    if (out_h == 0 || out_w == 0 || h == 0 || w == 0) throw ShapeError("resize_bilinear: empty size");
    if (h == out_h && w == out_w) return x;
    const auto ty = linear_taps(h, out_h);
    const auto tx = linear_taps(w, out_w);
    Image out({out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = ty[y].frac;
        for (std::size_t xx = 0; xx < out_w; ++xx) {
            const double fx = tx[xx].frac;
            const double top = (1 - fx) * x[ty[y].lo * w + tx[xx].lo] + fx * x[ty[y].lo * w + tx[xx].hi];
            const double bot = (1 - fx) * x[ty[y].hi * w + tx[xx].lo] + fx * x[ty[y].hi * w + tx[xx].hi];
            out[y * out_w + xx] = static_cast<float>((1 - fy) * top + fy * bot);
        }
    }
    return out;
}

inline Image resize_bilinear(const Image& x, std::size_t target) { return resize_bilinear(x, target, target); }

// Nearest-neighbour resize for label maps, so labels stay valid.
inline Mask resize_nearest(const Mask& m, std::size_t out_h, std::size_t out_w) {
    require_rank(m.shape(), 2, "resize_nearest input");
    const std::size_t h = m.dim(0), w = m.dim(1);
    if (out_h == 0 || out_w == 0 || h == 0 || w == 0) throw ShapeError("resize_nearest: empty size");
    const auto iy = nearest_taps(h, out_h);
    const auto ix = nearest_taps(w, out_w);
    Mask out({out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) out[y * out_w + x] = m[iy[y] * w + ix[x]];
    return out;
}

inline Mask resize_nearest(const Mask& m, std::size_t target) { return resize_nearest(m, target, target); }

// ---------------------------------------------------------------------------
// Geometric warps. A warp maps every output pixel (y, x) to a source
// coordinate; images are sampled bilinearly, masks by nearest neighbour, and
// anything outside the source grid reads as 0.

namespace detail {

inline float sample_bilinear_zero(const Image& img, double sy, double sx) {
    const auto h = static_cast<std::ptrdiff_t>(img.dim(0));
    const auto w = static_cast<std::ptrdiff_t>(img.dim(1));
    const double fy0 = std::floor(sy), fx0 = std::floor(sx);
    const auto y0 = static_cast<std::ptrdiff_t>(fy0), x0 = static_cast<std::ptrdiff_t>(fx0);
    const double fy = sy - fy0, fx = sx - fx0;
    auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> double {
        if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
        return img[static_cast<std::size_t>(y * w + x)];
    };
    double v = 0.0;
    if ((1 - fy) * (1 - fx) != 0.0) v += (1 - fy) * (1 - fx) * at(y0, x0);
    if ((1 - fy) * fx != 0.0) v += (1 - fy) * fx * at(y0, x0 + 1);
    if (fy * (1 - fx) != 0.0) v += fy * (1 - fx) * at(y0 + 1, x0);
    if (fy * fx != 0.0) v += fy * fx * at(y0 + 1, x0 + 1);
    return static_cast<float>(v);
}

inline std::uint8_t sample_nearest_zero(const Mask& m, double sy, double sx) {
    const auto h = static_cast<std::ptrdiff_t>(m.dim(0));
    const auto w = static_cast<std::ptrdiff_t>(m.dim(1));
    const auto y = static_cast<std::ptrdiff_t>(std::floor(sy + 0.5));
    const auto x = static_cast<std::ptrdiff_t>(std::floor(sx + 0.5));
    if (y < 0 || y >= h || x < 0 || x >= w) return 0;
    return m[static_cast<std::size_t>(y * w + x)];
}

template <typename SourceOf>
std::pair<Image, Mask> warp(const Image& image, const Mask& mask, SourceOf source_of) {
    require_rank(image.shape(), 2, "warp image");
    if (mask.shape() != image.shape()) throw ShapeError("warp: image and mask shapes differ");
    const std::size_t h = image.dim(0), w = image.dim(1);
    Image out_img(image.shape());
    Mask out_mask(mask.shape());
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const auto [sy, sx] = source_of(y, x);
            out_img[y * w + x] = sample_bilinear_zero(image, sy, sx);
            out_mask[y * w + x] = sample_nearest_zero(mask, sy, sx);
        }
    }
    return {std::move(out_img), std::move(out_mask)};
}

// cos/sin that are exact at multiples of 90 degrees.
inline std::pair<double, double> cos_sin_degrees(double degrees) {
    const double quarter = degrees / 90.0;
    if (quarter == std::floor(quarter)) {
        const auto q = static_cast<long long>(quarter);
        switch (((q % 4) + 4) % 4) {
            case 0: return {1.0, 0.0};
            case 1: return {0.0, 1.0};
            case 2: return {-1.0, 0.0};
            default: return {0.0, -1.0};
        }
    }
    const double rad = degrees * std::numbers::pi / 180.0;
    return {std::cos(rad), std::sin(rad)};
}

}  // namespace detail

// Rotation by `degrees` about the image center.
inline std::pair<Image, Mask> rotate(const Image& image, const Mask& mask, double degrees) {
    const double cy = (static_cast<double>(image.dim(0)) - 1.0) / 2.0;
    const double cx = (static_cast<double>(image.dim(1)) - 1.0) / 2.0;
    const auto [c, s] = detail::cos_sin_degrees(degrees);
    return detail::warp(image, mask, [=](std::size_t y, std::size_t x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        // Inverse rotation takes the output pixel back to its source.
        return std::pair<double, double>{cy - s * dx + c * dy, cx + c * dx + s * dy};
    });
}

// Angle drawn uniformly from [-max, +max].
inline std::pair<Image, Mask> random_rotate(const Image& image, const Mask& mask, const AugmentSpec& spec, Rng& rng) {
    spec.validate();
    const double angle = rng.uniform(-spec.max_rotation_degrees, spec.max_rotation_degrees);
    return rotate(image, mask, angle);
}

// Separable Gaussian blur, radius ceil(3 sigma). Taps falling outside the
// image are dropped and the remaining weights renormalized, so a very wide
// kernel tends to the plain mean instead of piling weight on the border.
inline std::vector<double> gaussian_blur(const std::vector<double>& field, std::size_t h, std::size_t w, double sigma) {
    if (sigma <= 0.0) return field;
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    }
    auto pass = [&](const std::vector<double>& in, std::size_t lines, std::size_t len, std::size_t line_step,
                    std::size_t step) {
        std::vector<double> out(in.size());
        const auto n = static_cast<std::ptrdiff_t>(len);
        for (std::size_t l = 0; l < lines; ++l) {
            for (std::ptrdiff_t p = 0; p < n; ++p) {
                const std::ptrdiff_t lo = std::max(-radius, -p), hi = std::min(radius, n - 1 - p);
                double acc = 0.0, wsum = 0.0;
                for (std::ptrdiff_t i = lo; i <= hi; ++i) {
                    const double k = kernel[static_cast<std::size_t>(i + radius)];
                    acc += k * in[l * line_step + static_cast<std::size_t>(p + i) * step];
                    wsum += k;
                }
                out[l * line_step + static_cast<std::size_t>(p) * step] = acc / wsum;
            }
        }
        return out;
    };
    return pass(pass(field, h, w, w, 1), w, h, 1, w);
}

// Smooth random displacement: per-pixel standard normal noise scaled by alpha,
// blurred with a Gaussian of width sigma. Returns (dy, dx) fields.
inline std::pair<std::vector<double>, std::vector<double>> displacement_field(std::size_t h, std::size_t w, double alpha,
                                                                             double sigma, Rng& rng) {
    std::vector<double> dy(h * w), dx(h * w);
    for (auto& v : dy) v = alpha * rng.normal();
    for (auto& v : dx) v = alpha * rng.normal();
    return {gaussian_blur(dy, h, w, sigma), gaussian_blur(dx, h, w, sigma)};
}

// Zoom by `scale` about the center, then displace by (dy, dx). Empty fields
// mean no displacement.
inline std::pair<Image, Mask> deform(const Image& image, const Mask& mask, double scale, const std::vector<double>& dy,
                                     const std::vector<double>& dx) {
    if (!(scale > 0.0)) throw ConfigError("zoom scale must be positive");
    const std::size_t w = image.dim(1);
    const double cy = (static_cast<double>(image.dim(0)) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    const bool displaced = !dy.empty();
    return detail::warp(image, mask, [&](std::size_t y, std::size_t x) {
        const std::size_t i = y * w + x;
        double sy = cy + (static_cast<double>(y) - cy) / scale;
        double sx = cx + (static_cast<double>(x) - cx) / scale;
        if (displaced) {
            sy += dy[i];
            sx += dx[i];
        }
        return std::pair<double, double>{sy, sx};
    });
}

inline std::pair<Image, Mask> elastic_deform(const Image& image, const Mask& mask, const AugmentSpec& spec, Rng& rng) {
    spec.validate();
    const double scale = rng.uniform(1.0 - spec.zoom_factor, 1.0 + spec.zoom_factor);
    if (spec.elastic_alpha == 0.0) return deform(image, mask, scale, {}, {});
    auto [dy, dx] = displacement_field(image.dim(0), image.dim(1), spec.elastic_alpha, spec.elastic_sigma, rng);
    return deform(image, mask, scale, dy, dx);
}

// Rotation followed by zoom/elastic deformation.
inline std::pair<Image, Mask> augment(const Image& image, const Mask& mask, const AugmentSpec& spec, Rng& rng) {
    auto [img, msk] = random_rotate(image, mask, spec, rng);
    return elastic_deform(img, msk, spec, rng);
}

}  // namespace lseg
