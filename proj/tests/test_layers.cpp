#include <algorithm>
#include <vector>

#include "helpers.hpp"

using namespace lseg;
using testing_util::max_abs_diff;
using testing_util::random_tensor;

namespace {

Conv2dParams<double> conv_params(Tensor<double> w, Tensor<double> b, std::size_t pad, std::size_t stride = 1) {
    Conv2dParams<double> p;
    p.weight = Var<double>(std::move(w), true);
    p.bias = Var<double>(std::move(b), true);
    p.pad = pad;
    p.stride = stride;
    return p;
}

// Direct six-loop convolution (plus batch) with zero padding.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                           std::size_t stride, std::size_t pad) {
    const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t cout = w.dim(0), k = w.dim(2);
    const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
    Tensor<double> y({n, cout, ho, wo});
    for (std::size_t bi = 0; bi < n; ++bi)
        for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double acc = b[o];
                    for (std::size_t i = 0; i < cin; ++i)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                                acc += x.at(bi, i, iy, ix) * w.at(o, i, ky, kx);
                            }
                    y[y.offset(bi, o, oy, ox)] = acc;
                }
    return y;
}

SeparableConv2dParams<double> random_separable(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng) {
    SeparableConv2dParams<double> p;
    p.depthwise_weight = Var<double>(random_tensor({cin, 1, k, k}, rng), true);
    p.depthwise_bias = Var<double>(random_tensor({cin}, rng), true);
    p.pointwise_weight = Var<double>(random_tensor({cout, cin, 1, 1}, rng), true);
    p.pointwise_bias = Var<double>(random_tensor({cout}, rng), true);
    return p;
}

// W[o,i] = pw[o,i] * dw[i]; bias[o] = pb[o] + sum_i pw[o,i] * db[i].
Conv2dParams<double> factored(const SeparableConv2dParams<double>& s) {
    const std::size_t cin = s.in_channels(), cout = s.out_channels(), k = s.kernel();
    Tensor<double> w({cout, cin, k, k}), b({cout});
    for (std::size_t o = 0; o < cout; ++o) {
        b[o] = s.pointwise_bias.value()[o];
        for (std::size_t i = 0; i < cin; ++i) {
            const double pw = s.pointwise_weight.value()[o * cin + i];
            b[o] += pw * s.depthwise_bias.value()[i];
            for (std::size_t t = 0; t < k * k; ++t) w[(o * cin + i) * k * k + t] = pw * s.depthwise_weight.value()[i * k * k + t];
        }
    }
    return conv_params(std::move(w), std::move(b), (k - 1) / 2);
}

}  // namespace

TEST(Conv2d, UnitKernelIdentity) {
    Rng rng(1);
    const auto x = random_tensor({2, 3, 4, 5}, rng);
    Tensor<double> w({3, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
    const auto p = conv_params(w, Tensor<double>({3}), 0);
    EXPECT_EQ(max_abs_diff(conv2d(Var<double>(x), p).value(), x), 0.0);
}

TEST(Conv2d, ZeroWeightGivesBias) {
    Rng rng(1);
    const auto p = conv_params(Tensor<double>({2, 3, 3, 3}), Tensor<double>({2}, {0.5, -1.5}), 1);
    const auto y = conv2d(Var<double>(random_tensor({1, 3, 4, 4}, rng)), p).value();
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_EQ(y[i], 0.5);
        EXPECT_EQ(y[16 + i], -1.5);
    }
}

TEST(Conv2d, MatchesDirectLoops) {
    Rng rng(2);
    const auto x = random_tensor({1, 3, 5, 5}, rng);
    const auto w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    EXPECT_LE(max_abs_diff(conv2d(Var<double>(x), conv_params(w, b, 1)).value(), conv_oracle(x, w, b, 1, 1)), 1e-10);
    // Strided and batched.
    const auto x2 = random_tensor({2, 2, 7, 6}, rng);
    const auto w2 = random_tensor({3, 2, 3, 3}, rng), b2 = random_tensor({3}, rng);
    EXPECT_LE(max_abs_diff(conv2d(Var<double>(x2), conv_params(w2, b2, 1, 2)).value(), conv_oracle(x2, w2, b2, 2, 1)),
              1e-10);
    const auto w3 = random_tensor({5, 2, 1, 1}, rng), b3 = random_tensor({5}, rng);
    EXPECT_LE(max_abs_diff(conv2d(Var<double>(x2), conv_params(w3, b3, 0)).value(), conv_oracle(x2, w3, b3, 1, 0)),
              1e-10);
}

TEST(Conv2d, ChannelMismatchThrows) {
    Rng rng(1);
    const auto p = conv_params(Tensor<double>({2, 3, 3, 3}), Tensor<double>({2}), 1);
    EXPECT_THROW(conv2d(Var<double>(random_tensor({1, 2, 4, 4}, rng)), p), ShapeError);
}

TEST(SeparableConv2d, DeltaAndIdentityIsIdentity) {
    Rng rng(3);
    SeparableConv2dParams<double> p;
    Tensor<double> dw({3, 1, 3, 3}), pw({3, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) {
        dw[c * 9 + 4] = 1.0;
        pw[c * 3 + c] = 1.0;
    }
    p.depthwise_weight = Var<double>(dw);
    p.depthwise_bias = Var<double>(Tensor<double>({3}));
    p.pointwise_weight = Var<double>(pw);
    p.pointwise_bias = Var<double>(Tensor<double>({3}));
    const auto x = random_tensor({2, 3, 5, 4}, rng);
    EXPECT_EQ(max_abs_diff(separable_conv2d(Var<double>(x), p).value(), x), 0.0);
}

TEST(SeparableConv2d, EqualsFactoredConv) {
    Rng rng(4);
    {
        const auto s = random_separable(4, 4, 3, rng);
        const auto x = random_tensor({1, 4, 6, 6}, rng);
        EXPECT_LE(max_abs_diff(separable_conv2d(Var<double>(x), s).value(), conv2d(Var<double>(x), factored(s)).value()),
                  1e-10);
    }
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t cin = 1 + rng.below(8), cout = 1 + rng.below(8), k = trial % 3 == 0 ? 5 : 3;
        const auto s = random_separable(cin, cout, k, rng);
        const auto x = random_tensor({1 + rng.below(2), cin, 3 + rng.below(5), 3 + rng.below(5)}, rng);
        EXPECT_LE(max_abs_diff(separable_conv2d(Var<double>(x), s).value(), conv2d(Var<double>(x), factored(s)).value()),
                  1e-10)
            << cin << "->" << cout << " k" << k;
    }
}

TEST(SeparableConv2d, ParameterCounts) {
    Rng rng(5);
    EXPECT_EQ(separable_parameter_count(64, 128, 3), 8960u);
    EXPECT_EQ(conv2d_parameter_count(64, 128, 3), 73856u);
    EXPECT_EQ(make_separable_conv2d<float>(64, 128, 3, rng).parameter_count(), 8960u);
    EXPECT_EQ(make_conv2d<float>(64, 128, 3, rng).parameter_count(), 73856u);
    for (std::size_t cin : {1, 3, 8})
        for (std::size_t cout : {2, 5})
            for (std::size_t k : {1, 3, 5}) {
                EXPECT_EQ(make_separable_conv2d<float>(cin, cout, k, rng).parameter_count(), cin * (k * k + 1) + cout * (cin + 1));
                EXPECT_EQ(make_conv2d<float>(cin, cout, k, rng).parameter_count(), cout * (cin * k * k + 1));
            }
    EXPECT_THROW(make_separable_conv2d<float>(4, 4, 2, rng), ShapeError);
}

TEST(BatchNorm, InferAtIdentityStatistics) {
    Rng rng(6);
    auto p = make_batch_norm<double>(3);
    const auto x = random_tensor({2, 3, 4, 4}, rng);
    const auto y = batch_norm(Var<double>(x), p, Mode::infer).value();
    EXPECT_LE(max_abs_diff(y, x), 1e-5);
}

TEST(BatchNorm, TrainNormalizesPerChannel) {
    Rng rng(7);
    auto p = make_batch_norm<double>(3);
    const auto x = random_tensor({4, 3, 5, 5}, rng, -3.0, 7.0);
    const auto y = batch_norm(Var<double>(x), p, Mode::train).value();
    for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0, sq = 0.0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) s += y[(n * 3 + c) * 25 + i];
        const double mean = s / 100.0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) sq += (y[(n * 3 + c) * 25 + i] - mean) * (y[(n * 3 + c) * 25 + i] - mean);
        EXPECT_NEAR(mean, 0.0, 1e-5);
        EXPECT_NEAR(sq / 100.0, 1.0, 1e-5);
    }
    // Running stats moved toward the batch statistics with momentum 0.1.
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NE(p.running_mean[c], 0.0);
        EXPECT_NE(p.running_var[c], 1.0);
    }
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
    Rng rng(8);
    auto p = make_batch_norm<double>(3);
    p.gamma.mutable_value() = random_tensor({3}, rng, 0.5, 1.5);
    p.beta.mutable_value() = random_tensor({3}, rng);
    Var<double> x(random_tensor({2, 3, 4, 4}, rng), true);
    const Var<double> r(random_tensor({2, 3, 4, 4}, rng));
    const auto res = grad_check_vars([&] { return sum(batch_norm(x, p, Mode::train) * r); }, {x, p.gamma, p.beta});
    EXPECT_LE(res.max_relative_error, 1e-4);
}

TEST(MaxPool, ExampleAndArgmaxRouting) {
    Var<double> x(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}), true);
    const auto y = max_pool_2x2(x);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(y.value()[0], 4.0);
    backward(sum(y));
    EXPECT_EQ(x.grad().data()[0], 0.0);
    EXPECT_EQ(x.grad().data()[1], 0.0);
    EXPECT_EQ(x.grad().data()[2], 0.0);
    EXPECT_EQ(x.grad().data()[3], 1.0);
}

TEST(MaxPool, ConstantAndTies) {
    Var<double> x(Tensor<double>::full({1, 2, 4, 6}, 2.5), true);
    const auto y = max_pool_2x2(x);
    ASSERT_EQ(y.shape(), (Shape{1, 2, 2, 3}));
    for (double v : y.value().data()) EXPECT_EQ(v, 2.5);
    backward(sum(y));
    // Ties go to the top-left of each window.
    EXPECT_EQ(x.grad()[0], 1.0);
    EXPECT_EQ(x.grad()[1], 0.0);
    EXPECT_EQ(x.grad()[6], 0.0);
    EXPECT_THROW(max_pool_2x2(Var<double>(Tensor<double>({1, 1, 3, 4}))), ShapeError);
}

TEST(Bilinear, HalfPixelRow) {
    const auto y = bilinear_resize(Var<double>(Tensor<double>({1, 1, 1, 2}, {0, 2})), 1, 4).value();
    EXPECT_EQ(y.data()[0], 0.0);
    EXPECT_EQ(y.data()[1], 0.5);
    EXPECT_EQ(y.data()[2], 1.5);
    EXPECT_EQ(y.data()[3], 2.0);
}

TEST(Bilinear, UpsampleTwoByTwo) {
    // Hand evaluation: taps at source coords -0.25, 0.25, 0.75, 1.25 (clamped).
    const auto y = bilinear_upsample_2x(Var<double>(Tensor<double>({1, 1, 2, 2}, {0, 4, 8, 12}))).value();
    ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
    const double row[4] = {0, 1, 3, 4};
    const double col[4] = {0, 2, 6, 8};
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y[r * 4 + c], col[r] + row[c]);
}

TEST(Bilinear, ConstantLinearityAndRange) {
    Rng rng(9);
    const auto c = bilinear_upsample_2x(Var<double>(Tensor<double>::full({1, 2, 3, 5}, 0.7))).value();
    for (double v : c.data()) EXPECT_DOUBLE_EQ(v, 0.7);
    const auto x = random_tensor({2, 3, 4, 5}, rng), z = random_tensor({2, 3, 4, 5}, rng);
    Tensor<double> comb(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) comb[i] = 1.5 * x[i] - 0.25 * z[i];
    const auto ux = bilinear_upsample_2x(Var<double>(x)).value(), uz = bilinear_upsample_2x(Var<double>(z)).value();
    const auto uc = bilinear_upsample_2x(Var<double>(comb)).value();
    for (std::size_t i = 0; i < uc.size(); ++i) EXPECT_NEAR(uc[i], 1.5 * ux[i] - 0.25 * uz[i], 1e-6);
    const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
    for (double v : ux.data()) {
        EXPECT_GE(v, *lo);
        EXPECT_LE(v, *hi);
    }
}

TEST(PixelShuffle, Examples) {
    const auto y = pixel_shuffle(Var<double>(Tensor<double>({1, 4, 1, 1}, {1, 2, 3, 4})), 2).value();
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{1, 2, 3, 4}));
    Rng rng(10);
    const auto x = random_tensor({2, 8, 3, 3}, rng);
    EXPECT_EQ(max_abs_diff(pixel_shuffle(Var<double>(x), 1).value(), x), 0.0);
    const auto s = pixel_shuffle(Var<double>(x), 2).value();
    ASSERT_EQ(s.shape(), (Shape{2, 2, 6, 6}));
    EXPECT_EQ(max_abs_diff(pixel_unshuffle(s, 2), x), 0.0);
    std::vector<double> a(x.data().begin(), x.data().end()), b(s.data().begin(), s.data().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
    EXPECT_THROW(pixel_shuffle(Var<double>(Tensor<double>({1, 3, 2, 2})), 2), ShapeError);
}

TEST(Dropout, IdentityCasesAndRate) {
    Rng rng(11);
    const auto x = random_tensor({1, 2, 3, 3}, rng);
    EXPECT_EQ(max_abs_diff(dropout(Var<double>(x), DropoutParams{0.0}, Mode::train, rng).value(), x), 0.0);
    EXPECT_EQ(max_abs_diff(dropout(Var<double>(x), DropoutParams{0.5}, Mode::infer, rng).value(), x), 0.0);
    const std::size_t n = 1000000;
    Rng drop(0, Stream::dropout);
    const auto y = dropout(Var<float>(Tensor<float>::ones({n})), DropoutParams{0.05}, Mode::train, drop).value();
    std::size_t zeros = 0;
    for (float v : y.data()) {
        if (v == 0.0f) ++zeros;
        else EXPECT_FLOAT_EQ(v, 1.0f / 0.95f);
    }
    const double frac = static_cast<double>(zeros) / static_cast<double>(n);
    EXPECT_GE(frac, 0.048);
    EXPECT_LE(frac, 0.052);
}

TEST(Activations, ReluAndSoftmax) {
    const auto r = relu(Var<double>(Tensor<double>({3}, {-1, 0, 2}))).value();
    EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0, 0, 2}));
    const auto s = softmax_channels(Var<double>(Tensor<double>({1, 2, 1, 1}, {0.3, 0.3}))).value();
    EXPECT_EQ(s[0], 0.5);
    EXPECT_EQ(s[1], 0.5);
    Rng rng(12);
    const auto x = random_tensor({2, 4, 3, 3}, rng, -5.0, 5.0);
    Tensor<double> shifted = x;
    for (auto& v : shifted.data()) v += 17.0;
    const auto a = softmax_channels(Var<double>(x)).value(), b = softmax_channels(Var<double>(shifted)).value();
    EXPECT_LE(max_abs_diff(a, b), 1e-7);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 9; ++i) {
            double total = 0.0;
            for (std::size_t c = 0; c < 4; ++c) total += a[(n * 4 + c) * 9 + i];
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
}

TEST(Layers, ParameterizedGradients) {
    Rng rng(13);
    for (int instance = 0; instance < 3; ++instance) {
        Var<double> x(random_tensor({2, 3, 5, 5}, rng), true);
        auto c = conv_params(random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng), 1);
        const Var<double> rc(random_tensor({2, 4, 5, 5}, rng));
        EXPECT_LE(grad_check_vars([&] { return sum(conv2d(x, c) * rc); }, {x, c.weight, c.bias}).max_relative_error,
                  1e-4);
        auto s = random_separable(3, 4, 3, rng);
        EXPECT_LE(grad_check_vars([&] { return sum(separable_conv2d(x, s) * rc); },
                                  {x, s.depthwise_weight, s.depthwise_bias, s.pointwise_weight, s.pointwise_bias})
                      .max_relative_error,
                  1e-4);
    }
}

TEST(Layers, ConcatChannels) {
    Rng rng(14);
    Var<double> a(random_tensor({2, 1, 2, 2}, rng), true), b(random_tensor({2, 3, 2, 2}, rng), true);
    const auto c = concat_channels(a, b);
    ASSERT_EQ(c.shape(), (Shape{2, 4, 2, 2}));
    EXPECT_EQ(c.value().at(1, 0, 1, 1), a.value().at(1, 0, 1, 1));
    EXPECT_EQ(c.value().at(1, 3, 0, 1), b.value().at(1, 2, 0, 1));
    EXPECT_THROW(concat_channels(a, Var<double>(Tensor<double>({2, 1, 3, 2}))), ShapeError);
}
