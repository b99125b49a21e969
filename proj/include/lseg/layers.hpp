#pragma once

// Neural network layers built on the autograd graph: standard and depthwise
// separable convolution, batch normalization, 2x2 max pooling, bilinear 2x
// upsampling, pixel shuffle, dropout, ReLU, channel softmax and channel
// concatenation. All feature maps are [N, C, H, W].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lseg/autograd.hpp"
#include "lseg/interp.hpp"
#include "lseg/kernels.hpp"
#include "lseg/rng.hpp"

namespace lseg {

enum class Mode { train, infer };

namespace detail {

inline void require_4d(const Shape& s, const char* what) { require_rank(s, 4, what); }

template <typename T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal() * std_dev);
    return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameter containers

template <typename T>
struct Conv2dParams {
    Var<T> weight;  // [C_out, C_in, k, k]
    Var<T> bias;    // [C_out]
    std::size_t stride = 1;
    std::size_t pad = 0;

    std::size_t out_channels() const { return weight.shape()[0]; }
    std::size_t in_channels() const { return weight.shape()[1]; }
    std::size_t kernel() const { return weight.shape()[2]; }
    std::size_t parameter_count() const { return weight.value().size() + bias.value().size(); }
};

template <typename T>
struct SeparableConv2dParams {
    Var<T> depthwise_weight;  // [C_in, 1, k, k]
    Var<T> depthwise_bias;    // [C_in]
    Var<T> pointwise_weight;  // [C_out, C_in, 1, 1]
    Var<T> pointwise_bias;    // [C_out]

    std::size_t in_channels() const { return depthwise_weight.shape()[0]; }
    std::size_t out_channels() const { return pointwise_weight.shape()[0]; }
    std::size_t kernel() const { return depthwise_weight.shape()[2]; }
    std::size_t parameter_count() const {
        return depthwise_weight.value().size() + depthwise_bias.value().size() + pointwise_weight.value().size() +
               pointwise_bias.value().size();
    }
};

template <typename T>
struct BatchNormParams {
    Var<T> gamma;
    Var<T> beta;
    Tensor<T> running_mean;
    Tensor<T> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    std::size_t channels() const { return gamma.value().size(); }
};

struct DropoutParams {
    double rate = 0.05;
};

// Closed-form parameter counts.
constexpr std::size_t conv2d_parameter_count(std::size_t in, std::size_t out, std::size_t k) {
    return out * (in * k * k + 1);
}
constexpr std::size_t separable_parameter_count(std::size_t in, std::size_t out, std::size_t k) {
    return in * (k * k + 1) + out * (in + 1);
}

// "Same" padding for odd kernels at stride 1.
template <typename T>
Conv2dParams<T> make_conv2d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng) {
    if (kernel == 0 || kernel % 2 == 0) throw ShapeError("conv2d kernel must be odd, got " + std::to_string(kernel));
    Conv2dParams<T> p;
    p.weight = Var<T>(detail::kaiming_normal<T>({out, in, kernel, kernel}, in * kernel * kernel, rng), true);
    p.bias = Var<T>(Tensor<T>::zeros({out}), true);
    p.stride = 1;
    p.pad = (kernel - 1) / 2;
    return p;
}

template <typename T>
SeparableConv2dParams<T> make_separable_conv2d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng) {
    if (kernel == 0 || kernel % 2 == 0) {
        throw ShapeError("separable conv kernel must be odd, got " + std::to_string(kernel));
    }
    SeparableConv2dParams<T> p;
    p.depthwise_weight = Var<T>(detail::kaiming_normal<T>({in, 1, kernel, kernel}, kernel * kernel, rng), true);
    p.depthwise_bias = Var<T>(Tensor<T>::zeros({in}), true);
    p.pointwise_weight = Var<T>(detail::kaiming_normal<T>({out, in, 1, 1}, in, rng), true);
    p.pointwise_bias = Var<T>(Tensor<T>::zeros({out}), true);
    return p;
}

template <typename T>
BatchNormParams<T> make_batch_norm(std::size_t channels) {
    BatchNormParams<T> p;
    p.gamma = Var<T>(Tensor<T>::ones({channels}), true);
    p.beta = Var<T>(Tensor<T>::zeros({channels}), true);
    p.running_mean = Tensor<T>::zeros({channels});
    p.running_var = Tensor<T>::ones({channels});
    return p;
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

// 1x1, stride 1, no padding: per-sample [C_out x C_in] * [C_in x H*W].
template <typename T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const auto& s = x.shape();
    const std::size_t n = s[0], cin = s[1], plane = s[2] * s[3];
    const std::size_t cout = weight.shape()[0];
    Tensor<T> out({n, cout, s[2], s[3]});
    auto xd = x.value().data();
    auto od = out.data();
    for (std::size_t b = 0; b < n; ++b) {
        kernels::gemm<T>(kernels::Trans::no, kernels::Trans::no, cout, plane, cin, weight.value().data(),
                         xd.subspan(b * cin * plane, cin * plane), od.subspan(b * cout * plane, cout * plane));
        for (std::size_t c = 0; c < cout; ++c) {
            const T bv = bias.value()[c];
            T* row = od.data() + (b * cout + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) row[i] += bv;
        }
    }
    return make_result<T>(std::move(out), {x, weight, bias}, "conv2d_1x1", [n, cin, cout, plane](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        auto g = std::span<const T>(self.grad.data());
        for (std::size_t b = 0; b < n; ++b) {
            auto gb = g.subspan(b * cout * plane, cout * plane);
            if (pw.requires_grad) {
                kernels::gemm<T>(kernels::Trans::no, kernels::Trans::yes, cout, cin, plane, gb,
                                 std::span<const T>(px.value.data()).subspan(b * cin * plane, cin * plane),
                                 pw.grad.data(), true);
            }
            if (px.requires_grad) {
                kernels::gemm<T>(kernels::Trans::yes, kernels::Trans::no, cin, plane, cout,
                                 std::span<const T>(pw.value.data()), gb,
                                 px.grad.data().subspan(b * cin * plane, cin * plane), true);
            }
            if (pb.requires_grad) {
                for (std::size_t c = 0; c < cout; ++c) {
                    T acc{0};
                    const T* row = gb.data() + c * plane;
                    for (std::size_t i = 0; i < plane; ++i) acc += row[i];
                    pb.grad[c] += acc;
                }
            }
        }
    });
}

}  // namespace detail

// Cross-correlation plus bias, realized as im2col + GEMM.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad) {
    detail::require_4d(x.shape(), "conv2d input");
    detail::require_4d(weight.shape(), "conv2d weight");
    const auto& s = x.shape();
    const auto& ws = weight.shape();
    if (ws[1] != s[1]) {
        throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(s[1]) + " channels, weight expects " +
                         std::to_string(ws[1]));
    }
    if (ws[2] != ws[3]) throw ShapeError("conv2d: only square kernels are supported");
    if (bias.value().size() != ws[0]) throw ShapeError("conv2d: bias length does not match output channels");
    if (ws[2] == 1 && stride == 1 && pad == 0) return detail::pointwise_conv(x, weight, bias);

    const kernels::ConvGeometry g{s[0], s[1], s[2], s[3], ws[2], stride, pad};
    g.validate();
    const std::size_t cout = ws[0], rows = g.col_rows(), ncols = g.col_cols();
    const std::size_t ho = g.out_height(), wo = g.out_width(), plane = ho * wo;

    std::vector<T> cols(rows * ncols);
    kernels::im2col<T>(g, x.value().data(), cols);
    std::vector<T> prod(cout * ncols);
    kernels::gemm<T>(kernels::Trans::no, kernels::Trans::no, cout, ncols, rows, weight.value().data(), cols, prod);

    Tensor<T> out({s[0], cout, ho, wo});
    for (std::size_t n = 0; n < s[0]; ++n) {
        for (std::size_t c = 0; c < cout; ++c) {
            const T bv = bias.value()[c];
            const T* src = prod.data() + c * ncols + n * plane;
            T* dst = out.data().data() + (n * cout + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] + bv;
        }
    }

    return make_result<T>(std::move(out), {x, weight, bias}, "conv2d", [g, cout, rows, ncols, plane](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        // Gradient in the [C_out x N*Ho*Wo] layout of the GEMM output.
        std::vector<T> gmat(cout * ncols);
        for (std::size_t n = 0; n < g.batch; ++n) {
            for (std::size_t c = 0; c < cout; ++c) {
                const T* src = self.grad.data().data() + (n * cout + c) * plane;
                std::copy(src, src + plane, gmat.data() + c * ncols + n * plane);
            }
        }
        if (pb.requires_grad) {
            for (std::size_t c = 0; c < cout; ++c) {
                T acc{0};
                for (std::size_t i = 0; i < ncols; ++i) acc += gmat[c * ncols + i];
                pb.grad[c] += acc;
            }
        }
        if (pw.requires_grad) {
            std::vector<T> cols(rows * ncols);
            kernels::im2col<T>(g, px.value.data(), cols);
            kernels::gemm<T>(kernels::Trans::no, kernels::Trans::yes, cout, rows, ncols, gmat, cols, pw.grad.data(),
                             true);
        }
        if (px.requires_grad) {
            std::vector<T> dcols(rows * ncols);
            kernels::gemm<T>(kernels::Trans::yes, kernels::Trans::no, rows, ncols, cout,
                             std::span<const T>(pw.value.data()), gmat, dcols);
            std::vector<T> dx(px.value.size());
            kernels::col2im<T>(g, dcols, dx);
            for (std::size_t i = 0; i < dx.size(); ++i) px.grad[i] += dx[i];
        }
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Conv2dParams<T>& p) {
    return conv2d(x, p.weight, p.bias, p.stride, p.pad);
}

// Per-channel k x k convolution, stride 1, "same" padding. weight is [C, 1, k, k].
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    detail::require_4d(x.shape(), "depthwise_conv2d input");
    const auto& s = x.shape();
    const auto& ws = weight.shape();
    if (ws.size() != 4 || ws[0] != s[1] || ws[1] != 1 || ws[2] != ws[3]) {
        throw ShapeError("depthwise_conv2d: weight " + to_string(ws) + " does not fit input " + to_string(s));
    }
    const std::size_t k = ws[2];
    if (k % 2 == 0) throw ShapeError("depthwise_conv2d: kernel must be odd");
    const std::size_t n = s[0], c = s[1], h = s[2], w = s[3], plane = h * w;
    Tensor<T> out(s);
    kernels::depthwise_forward<T>(n, c, h, w, k, x.value().data(), weight.value().data(), out.data());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T bv = bias.value()[ch];
            T* row = out.data().data() + (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) row[i] += bv;
        }
    }
    return make_result<T>(std::move(out), {x, weight, bias}, "depthwise_conv2d", [n, c, h, w, k](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const std::size_t plane = h * w;
        std::vector<T> dx(px.requires_grad ? px.value.size() : 0);
        kernels::depthwise_backward<T>(n, c, h, w, k, px.value.data(), pw.value.data(), self.grad.data(), dx,
                                       pw.requires_grad ? pw.grad.data() : std::span<T>{});
        for (std::size_t i = 0; i < dx.size(); ++i) px.grad[i] += dx[i];
        if (pb.requires_grad) {
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const T* row = self.grad.data().data() + (b * c + ch) * plane;
                    T acc{0};
                    for (std::size_t i = 0; i < plane; ++i) acc += row[i];
                    pb.grad[ch] += acc;
                }
            }
        }
    });
}

// Depthwise k x k per channel, then 1x1 pointwise mixing.
template <typename T>
Var<T> separable_conv2d(const Var<T>& x, const SeparableConv2dParams<T>& p) {
    detail::require_4d(x.shape(), "separable_conv2d input");
    if (x.shape()[1] != p.in_channels()) {
        throw ShapeError("separable_conv2d: channel mismatch, input has " + std::to_string(x.shape()[1]) +
                         " channels, layer expects " + std::to_string(p.in_channels()));
    }
    return conv2d(depthwise_conv2d(x, p.depthwise_weight, p.depthwise_bias), p.pointwise_weight, p.pointwise_bias,
                  1, 0);
}

// ---------------------------------------------------------------------------
// Normalization and regularization

// Training: normalize with the biased batch variance per channel and fold the
// batch statistics into the running estimates (unbiased variance). Inference:
// normalize with the running estimates.
template <typename T>
Var<T> batch_norm(const Var<T>& x, BatchNormParams<T>& p, Mode mode) {
    detail::require_4d(x.shape(), "batch_norm input");
    const auto& s = x.shape();
    const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
    const std::size_t count = n * plane;
    if (c != p.channels()) {
        throw ShapeError("batch_norm: channel mismatch, input has " + std::to_string(c) + " channels, layer expects " +
                         std::to_string(p.channels()));
    }
    if (mode == Mode::train && count < 2) {
        throw ShapeError("batch_norm: degenerate batch, need at least 2 values per channel in train mode");
    }
    const auto& xv = x.value();
    std::vector<T> mean(c), invstd(c);
    using A = Accum<T>;
    if (mode == Mode::train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            A s1 = 0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* row = xv.data().data() + (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) s1 += row[i];
            }
            const A mu = s1 / static_cast<A>(count);
            A s2 = 0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* row = xv.data().data() + (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const A d = row[i] - mu;
                    s2 += d * d;
                }
            }
            const A var = s2 / static_cast<A>(count);
            mean[ch] = static_cast<T>(mu);
            invstd[ch] = static_cast<T>(A{1} / std::sqrt(var + static_cast<A>(p.eps)));
            const A unbiased = s2 / static_cast<A>(count - 1);
            const A m = static_cast<A>(p.momentum);
            p.running_mean[ch] = static_cast<T>((1 - m) * p.running_mean[ch] + m * mu);
            p.running_var[ch] = static_cast<T>((1 - m) * p.running_var[ch] + m * unbiased);
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = p.running_mean[ch];
            invstd[ch] = static_cast<T>(A{1} / std::sqrt(static_cast<A>(p.running_var[ch]) + static_cast<A>(p.eps)));
        }
    }

    Tensor<T> xhat(s);
    Tensor<T> out(s);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * plane;
            const T g = p.gamma.value()[ch], bt = p.beta.value()[ch];
            for (std::size_t i = 0; i < plane; ++i) {
                const T h = (xv[base + i] - mean[ch]) * invstd[ch];
                xhat[base + i] = h;
                out[base + i] = g * h + bt;
            }
        }
    }

    return make_result<T>(
        std::move(out), {x, p.gamma, p.beta}, "batch_norm",
        [mode, n, c, plane, invstd = std::move(invstd), xhat = std::move(xhat)](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const std::size_t count = n * plane;
            for (std::size_t ch = 0; ch < c; ++ch) {
                T sum_g{0}, sum_gx{0};
                for (std::size_t b = 0; b < n; ++b) {
                    const std::size_t base = (b * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_g += self.grad[base + i];
                        sum_gx += self.grad[base + i] * xhat[base + i];
                    }
                }
                if (pg.requires_grad) pg.grad[ch] += sum_gx;
                if (pb.requires_grad) pb.grad[ch] += sum_g;
                if (!px.requires_grad) continue;
                const T gamma = pg.value[ch];
                if (mode == Mode::train) {
                    const T k = gamma * invstd[ch] / static_cast<T>(count);
                    const T m = static_cast<T>(count);
                    for (std::size_t b = 0; b < n; ++b) {
                        const std::size_t base = (b * c + ch) * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            px.grad[base + i] += k * (m * self.grad[base + i] - sum_g - xhat[base + i] * sum_gx);
                        }
                    }
                } else {
                    const T k = gamma * invstd[ch];
                    for (std::size_t b = 0; b < n; ++b) {
                        const std::size_t base = (b * c + ch) * plane;
                        for (std::size_t i = 0; i < plane; ++i) px.grad[base + i] += k * self.grad[base + i];
                    }
                }
            }
        });
}

// Train: zero each value with probability rate and scale survivors by
// 1/(1 - rate). Infer (or rate 0): identity.
template <typename T>
Var<T> dropout(const Var<T>& x, const DropoutParams& p, Mode mode, Rng& rng) {
    if (!(p.rate >= 0.0 && p.rate < 1.0)) throw ShapeError("dropout rate must be in [0, 1)");
    if (mode == Mode::infer || p.rate == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p.rate));
    std::vector<T> mask(x.value().size());
    Tensor<T> out = x.value();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.bernoulli(p.rate) ? T{0} : keep_scale;
        out[i] *= mask[i];
    }
    return make_result<T>(std::move(out), {x}, "dropout", [mask = std::move(mask)](Node<T>& self) {
        auto& px = *self.parents[0];
        for (std::size_t i = 0; i < mask.size(); ++i) px.grad[i] += mask[i] * self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Resolution changes

// Non-overlapping 2x2 max. Backward routes each gradient to the window's
// argmax; ties go to the first position in row-major order.
template <typename T>
Var<T> max_pool_2x2(const Var<T>& x) {
    detail::require_4d(x.shape(), "max_pool_2x2 input");
    const auto& s = x.shape();
    if (s[2] % 2 != 0 || s[3] % 2 != 0) {
        throw ShapeError("max_pool_2x2: spatial size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                         " must be even");
    }
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
    Tensor<T> out({s[0], s[1], ho, wo});
    std::vector<std::uint32_t> argmax(out.size());
    const auto& xv = x.value();
    const bool record = BranchRecorder::active();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                std::size_t best = p * h * w + (2 * oy) * w + 2 * ox;
                const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
                for (std::size_t idx : cand) {
                    if (xv[idx] > xv[best]) best = idx;
                }
                if (record) BranchRecorder::record(best - (p * h * w + (2 * oy) * w + 2 * ox));
                const std::size_t o = (p * ho + oy) * wo + ox;
                out[o] = xv[best];
                argmax[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return make_result<T>(std::move(out), {x}, "max_pool_2x2", [argmax = std::move(argmax)](Node<T>& self) {
        auto& px = *self.parents[0];
        for (std::size_t o = 0; o < argmax.size(); ++o) px.grad[argmax[o]] += self.grad[o];
    });
}

// Bilinear resampling of every plane to out_h x out_w with half-pixel centers
// and border clamping. A fixed linear map, so backward is its transpose.
template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
    detail::require_4d(x.shape(), "bilinear input");
    const auto& s = x.shape();
    if (s[2] == 0 || s[3] == 0 || out_h == 0 || out_w == 0) throw ShapeError("bilinear: empty spatial size");
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
    auto ty = linear_taps(h, out_h);
    auto tx = linear_taps(w, out_w);
    Tensor<T> out({s[0], s[1], out_h, out_w});
    const auto& xv = x.value();
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = xv.data().data() + p * h * w;
        T* dst = out.data().data() + p * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T fy = static_cast<T>(ty[oy].frac);
            const T* r0 = src + ty[oy].lo * w;
            const T* r1 = src + ty[oy].hi * w;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const T fx = static_cast<T>(tx[ox].frac);
                const T top = (T{1} - fx) * r0[tx[ox].lo] + fx * r0[tx[ox].hi];
                const T bot = (T{1} - fx) * r1[tx[ox].lo] + fx * r1[tx[ox].hi];
                dst[oy * out_w + ox] = (T{1} - fy) * top + fy * bot;
            }
        }
    }
    return make_result<T>(std::move(out), {x}, "bilinear",
                          [planes, h, w, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](Node<T>& self) {
                              auto& px = *self.parents[0];
                              for (std::size_t p = 0; p < planes; ++p) {
                                  const T* g = self.grad.data().data() + p * out_h * out_w;
                                  T* dst = px.grad.data().data() + p * h * w;
                                  for (std::size_t oy = 0; oy < out_h; ++oy) {
                                      const T fy = static_cast<T>(ty[oy].frac);
                                      T* r0 = dst + ty[oy].lo * w;
                                      T* r1 = dst + ty[oy].hi * w;
                                      for (std::size_t ox = 0; ox < out_w; ++ox) {
                                          const T fx = static_cast<T>(tx[ox].frac);
                                          const T gv = g[oy * out_w + ox];
                                          r0[tx[ox].lo] += (T{1} - fy) * (T{1} - fx) * gv;
                                          r0[tx[ox].hi] += (T{1} - fy) * fx * gv;
                                          r1[tx[ox].lo] += fy * (T{1} - fx) * gv;
                                          r1[tx[ox].hi] += fy * fx * gv;
                                      }
                                  }
                              }
                          });
}

template <typename T>
Var<T> bilinear_upsample_2x(const Var<T>& x) {
    detail::require_4d(x.shape(), "bilinear_upsample_2x input");
    return bilinear_resize(x, 2 * x.shape()[2], 2 * x.shape()[3]);
}

// Sub-pixel rearrangement: out[n, c, y, x] = in[n, c*r*r + r*(y%r) + x%r, y/r, x/r].
// A pure permutation with no parameters.
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t r) {
    detail::require_4d(x.shape(), "pixel_shuffle input");
    const auto& s = x.shape();
    if (r == 0 || s[1] % (r * r) != 0) {
        throw ShapeError("pixel_shuffle: channel count " + std::to_string(s[1]) + " not divisible by r^2 = " +
                         std::to_string(r * r));
    }
    const std::size_t n = s[0], cin = s[1], h = s[2], w = s[3];
    const std::size_t cout = cin / (r * r), ho = h * r, wo = w * r;
    std::vector<std::size_t> src_of(n * cout * ho * wo);
    Tensor<T> out({n, cout, ho, wo});
    const auto& xv = x.value();
    std::size_t o = 0;
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t c = 0; c < cout; ++c) {
            for (std::size_t y = 0; y < ho; ++y) {
                for (std::size_t xx = 0; xx < wo; ++xx, ++o) {
                    const std::size_t ci = c * r * r + r * (y % r) + (xx % r);
                    const std::size_t src = ((b * cin + ci) * h + y / r) * w + xx / r;
                    src_of[o] = src;
                    out[o] = xv[src];
                }
            }
        }
    }
    return make_result<T>(std::move(out), {x}, "pixel_shuffle", [src_of = std::move(src_of)](Node<T>& self) {
        auto& px = *self.parents[0];
        for (std::size_t i = 0; i < src_of.size(); ++i) px.grad[src_of[i]] += self.grad[i];
    });
}

// Inverse of pixel_shuffle: [N, C, rH, rW] -> [N, C*r*r, H, W].
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
    require_rank(x.shape(), 4, "pixel_unshuffle input");
    const auto& s = x.shape();
    if (r == 0 || s[2] % r != 0 || s[3] % r != 0) throw ShapeError("pixel_unshuffle: spatial size not divisible by r");
    const std::size_t n = s[0], c = s[1], ho = s[2], wo = s[3], h = ho / r, w = wo / r;
    Tensor<T> out({n, c * r * r, h, w});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < ho; ++y)
                for (std::size_t xx = 0; xx < wo; ++xx)
                    out.at(b, ch * r * r + r * (y % r) + (xx % r), y / r, xx / r) = x.at(b, ch, y, xx);
    return out;
}

// ---------------------------------------------------------------------------
// Activations and structural ops

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    if (BranchRecorder::active()) {
        for (T v : out.data()) BranchRecorder::record(v > T{0});
    }
    for (auto& v : out.data()) v = v > T{0} ? v : T{0};
    return make_result<T>(std::move(out), {x}, "relu", [](Node<T>& self) {
        auto& px = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (px.value[i] > T{0}) px.grad[i] += self.grad[i];
        }
    });
}

// Softmax over the channel axis at every pixel, stabilized by subtracting the
// per-pixel maximum.
template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
    detail::require_4d(x.shape(), "softmax_channels input");
    const auto& s = x.shape();
    const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
    Tensor<T> out(s);
    const auto& xv = x.value();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t base = b * c * plane + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t ch = 0; ch < c; ++ch) mx = std::max(mx, xv[base + ch * plane]);
            T total{0};
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T e = std::exp(xv[base + ch * plane] - mx);
                out[base + ch * plane] = e;
                total += e;
            }
            for (std::size_t ch = 0; ch < c; ++ch) out[base + ch * plane] /= total;
        }
    }
    return make_result<T>(std::move(out), {x}, "softmax_channels", [n, c, plane](Node<T>& self) {
        auto& px = *self.parents[0];
        const auto& y = self.value;
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t base = b * c * plane + i;
                T dot{0};
                for (std::size_t ch = 0; ch < c; ++ch) dot += self.grad[base + ch * plane] * y[base + ch * plane];
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t k = base + ch * plane;
                    px.grad[k] += y[k] * (self.grad[k] - dot);
                }
            }
        }
    });
}

// [N, Ca, H, W] ++ [N, Cb, H, W] -> [N, Ca + Cb, H, W]
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    detail::require_4d(a.shape(), "concat_channels lhs");
    detail::require_4d(b.shape(), "concat_channels rhs");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
        throw ShapeError("concat_channels: shape mismatch " + to_string(sa) + " vs " + to_string(sb));
    }
    const std::size_t n = sa[0], ca = sa[1], cb = sb[1], plane = sa[2] * sa[3];
    Tensor<T> out({n, ca + cb, sa[2], sa[3]});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.value().data().data() + i * ca * plane, ca * plane, out.data().data() + i * (ca + cb) * plane);
        std::copy_n(b.value().data().data() + i * cb * plane, cb * plane,
                    out.data().data() + (i * (ca + cb) + ca) * plane);
    }
    return make_result<T>(std::move(out), {a, b}, "concat_channels", [n, ca, cb, plane](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t i = 0; i < n; ++i) {
            const T* g = self.grad.data().data() + i * (ca + cb) * plane;
            if (pa.requires_grad) {
                T* d = pa.grad.data().data() + i * ca * plane;
                for (std::size_t k = 0; k < ca * plane; ++k) d[k] += g[k];
            }
            if (pb.requires_grad) {
                T* d = pb.grad.data().data() + i * cb * plane;
                for (std::size_t k = 0; k < cb * plane; ++k) d[k] += g[ca * plane + k];
            }
        }
    });
}

}  // namespace lseg
