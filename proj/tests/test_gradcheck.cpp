#include <set>

#include "helpers.hpp"

using namespace lseg;

TEST(GradcheckSuite, LayerCasesPass) {
    const auto outcomes = run_gradcheck(gradcheck_cases(GradScope::layers), 5, 1e-4, 0);
    std::set<std::string> names;
    for (const auto& o : outcomes) {
        names.insert(o.name);
        EXPECT_TRUE(o.pass) << o.name << " " << o.max_error;
        EXPECT_LE(o.max_error, 1e-4) << o.name;
        EXPECT_EQ(o.instances, 5u);
    }
    for (const char* required : {"conv2d", "separable_conv2d", "batch_norm", "max_pool_2x2", "bilinear_upsample_2x",
                                 "pixel_shuffle", "relu", "softmax_channels", "weighted_cross_entropy"}) {
        EXPECT_EQ(names.count(required), 1u) << required;
    }
}

TEST(GradcheckSuite, BlockCasesPass) {
    for (const auto& o : run_gradcheck(gradcheck_cases(GradScope::block), 5, 1e-4, 0)) {
        EXPECT_TRUE(o.pass) << o.name << " " << o.max_error;
    }
}

TEST(GradcheckSuite, CorruptedBackwardIsCaught) {
    const auto outcomes = run_gradcheck(gradcheck_cases(GradScope::layers, true), 1, 1e-4, 0);
    bool found = false;
    for (const auto& o : outcomes) {
        if (o.name == "corrupted_relu") {
            found = true;
            EXPECT_FALSE(o.pass);
            EXPECT_GT(o.max_error, 1e-2);
        }
    }
    EXPECT_TRUE(found);
}

TEST(GradcheckSuite, ScopeParsing) {
    EXPECT_EQ(parse_grad_scope("block"), GradScope::block);
    EXPECT_THROW(parse_grad_scope("everything"), ConfigError);
}

TEST(GradCheck, DetectsKinkCrossings) {
    // relu at 3e-6 with eps 1e-5: both probes straddle the kink.
    Var<double> x(Tensor<double>({2}, {3e-6, 0.5}), true);
    const auto res = grad_check_vars([&] { return sum(relu(x)); }, {x});
    EXPECT_GE(res.kink_crossings, 1u);
}
