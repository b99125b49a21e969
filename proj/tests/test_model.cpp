#include <set>

#include "helpers.hpp"

using namespace lseg;
using testing_util::max_abs_diff;
using testing_util::random_tensor;

namespace {

// Closed-form count of a whole model from its channel schedule.
std::size_t hand_total(bool separable, std::size_t base, std::size_t k, std::size_t classes, bool subpixel_last) {
    auto conv = [&](std::size_t in, std::size_t out) {
        return separable ? in * (k * k + 1) + out * (in + 1) : out * (in * k * k + 1);
    };
    auto block = [&](std::size_t in, std::size_t out) {
        return 2 * in + conv(in, out) + conv(out, out) + (in != out ? out * (in + 1) : 0);
    };
    std::size_t total = 0, c = 1;
    for (std::size_t i = 0; i < 4; ++i) {
        total += block(c, base << i);
        c = base << i;
    }
    total += block(c, base * 16);
    c = base * 16;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t skip = base << (3 - i);
        const std::size_t up = (i == 3 && subpixel_last) ? c / 4 : c;
        total += block(up + skip, skip);
        c = skip;
    }
    return total + classes * (base + 1);
}

}  // namespace

TEST(Model, ProposedScheduleAtBase64) {
    const auto spec = ModelSpec::proposed(64);
    const auto enc = spec.encoder_blocks();
    const std::size_t expected_in[4] = {1, 64, 128, 256}, expected_out[4] = {64, 128, 256, 512};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(enc[i].in_channels, expected_in[i]);
        EXPECT_EQ(enc[i].out_channels, expected_out[i]);
    }
    EXPECT_EQ(spec.bottleneck_block().in_channels, 512u);
    EXPECT_EQ(spec.bottleneck_block().out_channels, 1024u);
    const auto dec = spec.decoder_blocks();
    const std::size_t dec_in[4] = {1536, 768, 384, 96}, dec_out[4] = {512, 256, 128, 64};
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(dec[i].in_channels, dec_in[i]);
        EXPECT_EQ(dec[i].out_channels, dec_out[i]);
    }
}

TEST(Model, ForwardShapesAndProbabilities) {
    Rng rng(1);
    auto m = build_model<float>(ModelSpec::proposed(8), rng);
    ForwardTrace trace;
    NoGradGuard guard;
    Var<float> x(random_tensor({2, 1, 64, 64}, rng).cast<float>());
    const auto y = forward(m, x, Mode::infer, nullptr, &trace).value();
    ASSERT_EQ(y.shape(), (Shape{2, 2, 64, 64}));
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(trace.encoder[i], (Shape{2, std::size_t{8} << i, std::size_t{64} >> i, std::size_t{64} >> i}));
    }
    EXPECT_EQ(trace.bottleneck, (Shape{2, 128, 4, 4}));
    EXPECT_EQ(trace.decoder[3], (Shape{2, 8, 64, 64}));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 64 * 64; ++i) EXPECT_NEAR(y[n * 2 * 4096 + i] + y[(n * 2 + 1) * 4096 + i], 1.0f, 1e-5f);
}

TEST(Model, BaselineAcceptsSameInputs) {
    Rng rng(2);
    auto a = build_model<float>(ModelSpec::proposed(4), rng);
    auto b = build_model<float>(ModelSpec::baseline(4), rng);
    NoGradGuard guard;
    for (std::size_t side : {16u, 48u}) {
        Var<float> x(Tensor<float>::full({1, 1, side, side}, 0.3f));
        EXPECT_EQ(forward(a, x, Mode::infer).shape(), forward(b, x, Mode::infer).shape());
        EXPECT_EQ(forward(a, x, Mode::infer).shape(), (Shape{1, 2, side, side}));
    }
}

TEST(Model, IndivisibleInputIsRejected) {
    Rng rng(3);
    auto m = build_model<float>(ModelSpec::proposed(4), rng);
    try {
        forward(m, Var<float>(Tensor<float>({1, 1, 40, 40})), Mode::infer);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("divisible by 16"), std::string::npos);
    }
}

TEST(Model, InferForwardIsDeterministic) {
    Rng rng(4);
    auto m = build_model<float>(ModelSpec::proposed(4), rng);
    Var<float> x(random_tensor({1, 1, 32, 32}, rng).cast<float>());
    NoGradGuard guard;
    EXPECT_EQ(max_abs_diff(forward(m, x, Mode::infer).value(), forward(m, x, Mode::infer).value()), 0.0);
    Rng d1(9, Stream::dropout), d2(9, Stream::dropout);
    EXPECT_EQ(max_abs_diff(forward(m, x, Mode::train, &d1).value(), forward(m, x, Mode::train, &d2).value()), 0.0);
}

TEST(Model, SameSeedSameWeights) {
    Rng r1(5, Stream::init), r2(5, Stream::init);
    auto a = build_model<float>(ModelSpec::proposed(4), r1);
    auto b = build_model<float>(ModelSpec::proposed(4), r2);
    auto ea = a.entries(), eb = b.entries();
    ASSERT_EQ(ea.size(), eb.size());
    for (std::size_t i = 0; i < ea.size(); ++i) {
        EXPECT_EQ(ea[i].name, eb[i].name);
        EXPECT_EQ(max_abs_diff(ea[i].tensor(), eb[i].tensor()), 0.0);
    }
}

TEST(ResNetBlock, ResidualIdentityPath) {
    Rng rng(6);
    auto b = make_resnet_block<double>({4, 4, 3, true}, rng);
    auto& s = std::get<SeparableConv2dParams<double>>(b.conv2.params);
    for (auto* v : {&s.depthwise_weight, &s.depthwise_bias, &s.pointwise_weight, &s.pointwise_bias}) v->mutable_value().fill(0.0);
    b.bn.eps = 0.0;
    const auto x = random_tensor({1, 4, 5, 5}, rng, 0.0, 2.0);
    EXPECT_LE(max_abs_diff(resnet_block_forward(b, Var<double>(x), Mode::infer, 0.0, nullptr).value(), x), 1e-15);
}

TEST(ResNetBlock, ProjectionWhenWidthChanges) {
    Rng rng(7);
    auto b = make_resnet_block<float>({8, 16, 3, true}, rng);
    EXPECT_TRUE(b.projection.has_value());
    EXPECT_FALSE(make_resnet_block<float>({8, 8, 3, true}, rng).projection.has_value());
    const auto y = resnet_block_forward(b, Var<float>(Tensor<float>({1, 8, 8, 8})), Mode::infer, 0.0, nullptr);
    EXPECT_EQ(y.shape(), (Shape{1, 16, 8, 8}));
    EXPECT_THROW(resnet_block_forward(b, Var<float>(Tensor<float>({1, 4, 8, 8})), Mode::infer, 0.0, nullptr), ShapeError);
}

TEST(Parameters, TotalsMatchClosedForm) {
    for (std::size_t base : {4u, 8u, 64u}) {
        auto p = ModelParams<float>::skeleton(ModelSpec::proposed(base));
        auto b = ModelParams<float>::skeleton(ModelSpec::baseline(base));
        EXPECT_EQ(count_parameters(p).total, hand_total(true, base, 3, 2, true)) << base;
        EXPECT_EQ(count_parameters(b).total, hand_total(false, base, 3, 2, false)) << base;
    }
    auto p = ModelParams<float>::skeleton(ModelSpec::proposed(64));
    auto b = ModelParams<float>::skeleton(ModelSpec::baseline(64));
    EXPECT_EQ(count_parameters(p).total, 5297678u);
    EXPECT_EQ(count_parameters(b).total, 33129348u);
}

TEST(Parameters, TableIsConsistent) {
    auto m = ModelParams<float>::skeleton(ModelSpec::proposed(8));
    const auto t = count_parameters(m);
    std::size_t sum = 0;
    std::set<std::string> names;
    for (const auto& r : t.rows) {
        sum += r.count;
        EXPECT_TRUE(names.insert(r.name).second) << r.name;
        if (r.kind == "bilinear" || r.kind == "pixel_shuffle" || r.kind == "max_pool") {
            EXPECT_EQ(r.count, 0u) << r.name;
        }
    }
    EXPECT_EQ(sum, t.total);
    EXPECT_EQ(t.count_of("dec4.up"), 0u);
    EXPECT_EQ(t.count_of("enc2.res.conv1_"), separable_parameter_count(8, 16, 3));
}

TEST(Parameters, CountEqualsScalarsMutatedByAdam) {
    Rng rng(8);
    auto m = build_model<float>(ModelSpec::proposed(4), rng);
    auto before = m.clone();
    auto params = m.parameters();
    for (auto& p : params) p.mutable_grad().fill(1.0f);
    AdamState<float> st;
    adam_step(params, st);
    auto eb = before.entries(), ea = m.entries();
    std::size_t changed = 0;
    for (std::size_t i = 0; i < ea.size(); ++i) {
        for (std::size_t j = 0; j < ea[i].tensor().size(); ++j) changed += ea[i].tensor()[j] != eb[i].tensor()[j];
    }
    EXPECT_EQ(changed, count_parameters(m).total);
}

TEST(Parameters, UpsamplingLayersHaveNoParameters) {
    auto m = ModelParams<float>::skeleton(ModelSpec::proposed(64));
    const auto t = count_parameters(m);
    int upsampling = 0;
    for (const auto& r : t.rows) {
        if (r.name.find(".up.") != std::string::npos) {
            ++upsampling;
            EXPECT_EQ(r.count, 0u);
            EXPECT_TRUE(r.kind == "bilinear" || r.kind == "pixel_shuffle");
        }
    }
    EXPECT_EQ(upsampling, 4);
}

TEST(ModelSpec, Validation) {
    auto s = ModelSpec::proposed(128);
    EXPECT_THROW(s.validate(), ShapeError);  // 128 * 16 > 1024
    s = ModelSpec::proposed(8);
    s.kernel = 2;
    EXPECT_THROW(s.validate(), ShapeError);
    EXPECT_THROW(parse_variant("resnet"), ConfigError);
}
