#include <array>
#include <vector>

#include "helpers.hpp"

using namespace lseg;
using testing_util::max_abs_diff;
using testing_util::random_tensor;

TEST(Tensor, RowMajorFlatIndex) {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const Shape s{1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(6), 1 + rng.below(7)};
        Tensor<float> t(s);
        const std::array<std::size_t, 4> idx{rng.below(s[0]), rng.below(s[1]), rng.below(s[2]), rng.below(s[3])};
        const std::size_t expected = ((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3];
        EXPECT_EQ(t.flat_index(idx), expected);
        EXPECT_EQ(t.offset(idx[0], idx[1], idx[2], idx[3]), expected);
    }
}

TEST(Tensor, DataLengthMustMatchShape) {
    EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
    EXPECT_THROW(Tensor<float>({2, 3}).reshaped({4, 2}), ShapeError);
}

TEST(Autograd, AddElementwise) {
    Var<double> a(Tensor<double>({2}, {1, 2}), true), b(Tensor<double>({2}, {3, 4}));
    const Var<double> c = a + b;
    EXPECT_EQ(c.value()[0], 4.0);
    EXPECT_EQ(c.value()[1], 6.0);
    backward(sum(c));
    EXPECT_EQ(a.grad()[0], 1.0);
    EXPECT_EQ(a.grad()[1], 1.0);
}

TEST(Autograd, MulByZerosIsZero) {
    Rng rng(3);
    Var<double> x(random_tensor({3, 4}, rng));
    Var<double> z(zeros_like(x.value()));
    const auto prod = (x * z).value();
    for (double v : prod.data()) EXPECT_EQ(v, 0.0);
}

TEST(Autograd, BroadcastOverLeadingAndUnitAxes) {
    Var<double> a(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}), true);
    Var<double> b(Tensor<double>({1, 3}, {10, 20, 30}), true);
    const Var<double> c = a + b;
    EXPECT_EQ(c.value()[4], 25.0);
    backward(sum(c));
    for (double g : b.grad().data()) EXPECT_EQ(g, 2.0);
    Var<double> bad(Tensor<double>({2}, {1, 2}));
    EXPECT_THROW(a + bad, ShapeError);
}

TEST(Autograd, MaximumRoutesGradient) {
    Var<double> a(Tensor<double>({3}, {1, 5, 2}), true), b(Tensor<double>({3}, {4, 0, 2}), true);
    backward(sum(maximum(a, b)));
    EXPECT_EQ(a.grad()[0], 0.0);
    EXPECT_EQ(a.grad()[1], 1.0);
    EXPECT_EQ(b.grad()[0], 1.0);
    EXPECT_EQ(a.grad()[2] + b.grad()[2], 1.0);
}

TEST(Matmul, IdentityExamples) {
    const Tensor<double> a({2, 2}, {1, 2, 3, 4});
    const Var<double> eye(Tensor<double>({2, 2}, {1, 0, 0, 1}));
    EXPECT_EQ(matmul(eye, Var<double>(a)).value().data()[3], 4.0);
    EXPECT_EQ(max_abs_diff(matmul(eye, Var<double>(a)).value(), a), 0.0);
    EXPECT_EQ(max_abs_diff(matmul(Var<double>(a), eye).value(), a), 0.0);
    const Var<double> row(Tensor<double>({1, 2}, {1, 2})), col(Tensor<double>({2, 1}, {3, 4}));
    EXPECT_EQ(matmul(row, col).value()[0], 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
    Rng rng(5);
    for (const auto [m, k, n] : {std::array<std::size_t, 3>{5, 7, 3}, {1, 1, 1}, {13, 300, 270}, {9, 2, 517}}) {
        const auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
        Tensor<double> oracle({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
                oracle[i * n + j] = acc;
            }
        EXPECT_LE(max_abs_diff(matmul(Var<double>(a), Var<double>(b)).value(), oracle), 1e-12) << m << "x" << k << "x" << n;
    }
    EXPECT_THROW(matmul(Var<double>(Tensor<double>({2, 3})), Var<double>(Tensor<double>({2, 3}))), ShapeError);
}

TEST(Matmul, GradientsMatchFiniteDifferences) {
    Rng rng(8);
    Var<double> a(random_tensor({4, 3}, rng), true), b(random_tensor({3, 5}, rng), true);
    const Var<double> r(random_tensor({4, 5}, rng));
    const auto res = grad_check_vars([&] { return sum(matmul(a, b) * r); }, {a, b});
    EXPECT_LE(res.max_relative_error, 1e-4);
}

namespace {

std::vector<double> run_im2col(const kernels::ConvGeometry& g, const Tensor<double>& x) {
    std::vector<double> cols(g.col_rows() * g.col_cols());
    kernels::im2col<double>(g, x.data(), cols);
    return cols;
}

}  // namespace

TEST(Im2col, SingleReceptiveField) {
    const Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
    const kernels::ConvGeometry g{1, 1, 2, 2, 2, 1, 0};
    const auto cols = run_im2col(g, x);
    EXPECT_EQ(cols, (std::vector<double>{1, 2, 3, 4}));
}

TEST(Im2col, UnitKernelIsReshape) {
    Rng rng(2);
    const auto x = random_tensor({1, 3, 4, 5}, rng);
    const kernels::ConvGeometry g{1, 3, 4, 5, 1, 1, 0};
    const auto cols = run_im2col(g, x);
    EXPECT_EQ(cols, std::vector<double>(x.data().begin(), x.data().end()));
}

TEST(Im2col, PaddedRampMatchesSlidingWindow) {
    const Tensor<double> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    const kernels::ConvGeometry g{1, 1, 3, 3, 3, 1, 1};
    const auto cols = run_im2col(g, x);
    ASSERT_EQ(g.col_cols(), 9u);
    for (std::size_t oy = 0; oy < 3; ++oy)
        for (std::size_t ox = 0; ox < 3; ++ox)
            for (std::size_t ky = 0; ky < 3; ++ky)
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    const long iy = static_cast<long>(oy + ky) - 1, ix = static_cast<long>(ox + kx) - 1;
                    const double expected = (iy < 0 || iy > 2 || ix < 0 || ix > 2) ? 0.0 : x[iy * 3 + ix];
                    EXPECT_EQ(cols[(ky * 3 + kx) * 9 + oy * 3 + ox], expected);
                }
    int zeros = 0;
    for (std::size_t r = 0; r < 9; ++r) zeros += cols[r * 9] == 0.0;
    EXPECT_EQ(zeros, 5);  // top row and left column of the first window
}

TEST(Im2col, Col2imIsTheAdjoint) {
    Rng rng(4);
    for (const auto& g : {kernels::ConvGeometry{2, 3, 5, 6, 3, 1, 1}, kernels::ConvGeometry{1, 2, 7, 7, 3, 2, 1},
                          kernels::ConvGeometry{2, 1, 4, 4, 1, 1, 0}}) {
        const auto x = random_tensor({g.batch, g.channels, g.height, g.width}, rng);
        const auto y = random_tensor({g.col_rows(), g.col_cols()}, rng);
        const auto cols = run_im2col(g, x);
        std::vector<double> back(x.size());
        kernels::col2im<double>(g, y.data(), back);
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t i = 0; i < cols.size(); ++i) lhs += cols[i] * y[i];
        for (std::size_t i = 0; i < back.size(); ++i) rhs += x[i] * back[i];
        EXPECT_NEAR(lhs, rhs, 1e-10);
    }
}

TEST(Backward, SumGivesOnes) {
    Rng rng(1);
    Var<double> x(random_tensor({2, 3, 4}, rng), true);
    backward(sum(x));
    for (double g : x.grad().data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
    Rng rng(1);
    Var<double> x(random_tensor({7}, rng), true);
    backward(sum(x * x));
    for (std::size_t i = 0; i < 7; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.value()[i]);
}

TEST(Backward, FanOutSumsBranches) {
    Var<double> x(Tensor<double>({3}, {1, -2, 3}), true);
    const Var<double> y = scale(x, 3.0);
    backward(sum(y * x + y));  // d/dx (3x^2 + 3x) = 6x + 3
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 6.0 * x.value()[i] + 3.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
    Var<double> x(Tensor<double>({2}, {1, 2}), true);
    NoGradGuard guard;
    const Var<double> y = x * x;
    EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, LinearFunctionIsExact) {
    Rng rng(9);
    const auto res = grad_check([](const Var<double>& v) { return sum(v); }, random_tensor({3, 4}, rng));
    EXPECT_LE(res.max_relative_error, 1e-10);
}

TEST(GradCheck, CompositeOps) {
    Rng rng(10);
    for (int i = 0; i < 5; ++i) {
        const Var<double> w(random_tensor({4, 4}, rng));
        const auto res = grad_check(
            [&](const Var<double>& v) {
                const Var<double> h = matmul(v, w);
                return mean(reshape(h * h - h, {16}));
            },
            random_tensor({4, 4}, rng));
        EXPECT_LE(res.max_relative_error, 1e-4);
    }
}

TEST(Rng, SameSeedAndStreamReproduce) {
    Rng a(42, Stream::augment), b(42, Stream::augment), c(42, Stream::dropout);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto va = a.next_u64();
        EXPECT_EQ(va, b.next_u64());
        differs = differs || va != c.next_u64();
    }
    EXPECT_TRUE(differs);
    Rng parent(42, Stream::batch);
    const Rng s1 = parent.substream(3);
    parent.next_u64();
    Rng s2 = parent.substream(3), s1c = s1;
    EXPECT_EQ(s1c.next_u64(), s2.next_u64());
}
