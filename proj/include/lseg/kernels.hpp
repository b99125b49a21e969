#pragma once

// Raw CPU kernels: blocked GEMM, im2col / col2im and depthwise convolution.
// They operate on contiguous row-major buffers and know nothing about autograd.
//
// Every output element is accumulated in a fixed order (ascending reduction
// index), so results are bit-reproducible run to run.

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "lseg/error.hpp"

namespace lseg::kernels {

enum class Trans { no, yes };

namespace detail {

inline constexpr std::size_t kTileN = 256;
inline constexpr std::size_t kTileK = 128;

// C[M x N] += A[M x K] * B[K x N], all row-major and untransposed.
template <typename T>
void gemm_nn_accumulate(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t j0 = 0; j0 < n; j0 += kTileN) {
        const std::size_t jn = std::min(kTileN, n - j0);
        for (std::size_t k0 = 0; k0 < k; k0 += kTileK) {
            const std::size_t kn = std::min(kTileK, k - k0);
            std::size_t i = 0;
            for (; i + 4 <= m; i += 4) {
                T* c0 = c + (i + 0) * n + j0;
                T* c1 = c + (i + 1) * n + j0;
                T* c2 = c + (i + 2) * n + j0;
                T* c3 = c + (i + 3) * n + j0;
                for (std::size_t kk = k0; kk < k0 + kn; ++kk) {
                    const T a0 = a[(i + 0) * k + kk];
                    const T a1 = a[(i + 1) * k + kk];
                    const T a2 = a[(i + 2) * k + kk];
                    const T a3 = a[(i + 3) * k + kk];
                    const T* brow = b + kk * n + j0;
                    for (std::size_t j = 0; j < jn; ++j) {
                        const T bv = brow[j];
                        c0[j] += a0 * bv;
                        c1[j] += a1 * bv;
                        c2[j] += a2 * bv;
                        c3[j] += a3 * bv;
                    }
                }
            }
            for (; i < m; ++i) {
                T* ci = c + i * n + j0;
                for (std::size_t kk = k0; kk < k0 + kn; ++kk) {
                    const T av = a[i * k + kk];
                    const T* brow = b + kk * n + j0;
                    for (std::size_t j = 0; j < jn; ++j) ci[j] += av * brow[j];
                }
            }
        }
    }
}

template <typename T>
std::vector<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    constexpr std::size_t kBlock = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
        for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
            const std::size_t r1 = std::min(rows, r0 + kBlock);
            const std::size_t c1 = std::min(cols, c0 + kBlock);
            for (std::size_t r = r0; r < r1; ++r) {
                for (std::size_t cc = c0; cc < c1; ++cc) out[cc * rows + r] = src[r * cols + cc];
            }
        }
    }
    return out;
}

}  // namespace detail

// C = op(A) * op(B) (or C += ... when accumulate is set). op(A) is M x K and
// op(B) is K x N; a transposed operand is stored in its untransposed layout
// (A as K x M, B as N x K).
template <typename T>
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
          std::span<const T> b, std::span<T> c, bool accumulate = false) {
    if (a.size() < m * k || b.size() < k * n || c.size() < m * n) {
        throw ShapeError("gemm: buffer smaller than the requested product");
    }
    if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), T{0});
    if (m == 0 || n == 0 || k == 0) return;

    std::vector<T> a_buf;
    std::vector<T> b_buf;
    const T* pa = a.data();
    const T* pb = b.data();
    if (trans_a == Trans::yes) {
        a_buf = detail::transposed(pa, k, m);
        pa = a_buf.data();
    }
    if (trans_b == Trans::yes) {
        b_buf = detail::transposed(pb, n, k);
        pb = b_buf.data();
    }
    detail::gemm_nn_accumulate(m, n, k, pa, pb, c.data());
}

struct ConvGeometry {
    std::size_t batch, channels, height, width;
    std::size_t kernel, stride, pad;

    std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
    std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
    std::size_t col_rows() const { return channels * kernel * kernel; }
    std::size_t col_cols() const { return batch * out_height() * out_width(); }

    void validate() const {
        if (kernel == 0 || stride == 0) throw ShapeError("convolution kernel and stride must be positive");
        if (height + 2 * pad < kernel || width + 2 * pad < kernel) {
            throw ShapeError("kernel " + std::to_string(kernel) + " larger than padded input " +
                             std::to_string(height + 2 * pad) + "x" + std::to_string(width + 2 * pad));
        }
    }
};

// Column matrix [(C*k*k) x (N*Ho*Wo)]. Row (c*k + ky)*k + kx, column
// (n*Ho + oy)*Wo + ox holds x[n, c, oy*stride + ky - pad, ox*stride + kx - pad],
// zero where that position falls in the padding.
template <typename T>
void im2col(const ConvGeometry& g, std::span<const T> x, std::span<T> cols) {
    g.validate();
    const std::size_t ho = g.out_height(), wo = g.out_width();
    const std::size_t ncols = g.col_cols();
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                T* row = cols.data() + ((c * g.kernel + ky) * g.kernel + kx) * ncols;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    const T* plane = x.data() + (n * g.channels + c) * g.height * g.width;
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
                        T* dst = row + (n * ho + oy) * wo;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
                            std::fill(dst, dst + wo, T{0});
                            continue;
                        }
                        const T* src = plane + static_cast<std::size_t>(iy) * g.width;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
                            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                                          ? T{0}
                                          : src[static_cast<std::size_t>(ix)];
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add every column entry back to its source pixel.
template <typename T>
void col2im(const ConvGeometry& g, std::span<const T> cols, std::span<T> x) {
    g.validate();
    std::fill(x.begin(), x.end(), T{0});
    const std::size_t ho = g.out_height(), wo = g.out_width();
    const std::size_t ncols = g.col_cols();
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const T* row = cols.data() + ((c * g.kernel + ky) * g.kernel + kx) * ncols;
                for (std::size_t n = 0; n < g.batch; ++n) {
                    T* plane = x.data() + (n * g.channels + c) * g.height * g.width;
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                        const T* src = row + (n * ho + oy) * wo;
                        T* dst = plane + static_cast<std::size_t>(iy) * g.width;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
                            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) {
                                dst[static_cast<std::size_t>(ix)] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Per-channel k x k cross-correlation with stride 1 and "same" zero padding.
// weight is [C, k, k], output has the input's spatial size.
template <typename T>
void depthwise_forward(std::size_t batch, std::size_t channels, std::size_t height, std::size_t width,
                       std::size_t kernel, std::span<const T> x, std::span<const T> weight, std::span<T> y) {
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((kernel - 1) / 2);
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(height), w = static_cast<std::ptrdiff_t>(width);
    std::fill(y.begin(), y.end(), T{0});
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
            const T* src = x.data() + (n * channels + c) * height * width;
            T* dst = y.data() + (n * channels + c) * height * width;
            const T* wk = weight.data() + c * kernel * kernel;
            for (std::size_t ky = 0; ky < kernel; ++ky) {
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
                const std::ptrdiff_t y1 = std::min<std::ptrdiff_t>(h, h - dy);
                for (std::size_t kx = 0; kx < kernel; ++kx) {
                    const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                    const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                    const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, w - dx);
                    const T wv = wk[ky * kernel + kx];
                    for (std::ptrdiff_t oy = y0; oy < y1; ++oy) {
                        T* drow = dst + oy * w;
                        const T* srow = src + (oy + dy) * w + dx;
                        for (std::ptrdiff_t ox = x0; ox < x1; ++ox) drow[ox] += wv * srow[ox];
                    }
                }
            }
        }
    }
}

// Gradients of depthwise_forward. dx is overwritten, dweight is accumulated.
template <typename T>
void depthwise_backward(std::size_t batch, std::size_t channels, std::size_t height, std::size_t width,
                        std::size_t kernel, std::span<const T> x, std::span<const T> weight, std::span<const T> dy,
                        std::span<T> dx, std::span<T> dweight) {
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((kernel - 1) / 2);
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(height), w = static_cast<std::ptrdiff_t>(width);
    if (!dx.empty()) std::fill(dx.begin(), dx.end(), T{0});
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (n * channels + c) * height * width;
            const T* src = x.data() + base;
            const T* g = dy.data() + base;
            T* gx = dx.empty() ? nullptr : dx.data() + base;
            const T* wk = weight.data() + c * kernel * kernel;
            T* gw = dweight.empty() ? nullptr : dweight.data() + c * kernel * kernel;
            for (std::size_t ky = 0; ky < kernel; ++ky) {
                const std::ptrdiff_t oy_shift = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -oy_shift);
                const std::ptrdiff_t y1 = std::min<std::ptrdiff_t>(h, h - oy_shift);
                for (std::size_t kx = 0; kx < kernel; ++kx) {
                    const std::ptrdiff_t ox_shift = static_cast<std::ptrdiff_t>(kx) - pad;
                    const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -ox_shift);
                    const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, w - ox_shift);
                    const T wv = wk[ky * kernel + kx];
                    T acc{0};
                    for (std::ptrdiff_t oy = y0; oy < y1; ++oy) {
                        const T* grow = g + oy * w;
                        const std::ptrdiff_t srow_off = (oy + oy_shift) * w + ox_shift;
                        for (std::ptrdiff_t ox = x0; ox < x1; ++ox) {
                            acc += grow[ox] * src[srow_off + ox];
                            if (gx) gx[srow_off + ox] += wv * grow[ox];
                        }
                    }
                    if (gw) gw[ky * kernel + kx] += acc;
                }
            }
        }
    }
}

}  // namespace lseg::kernels
