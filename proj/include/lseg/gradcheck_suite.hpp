#pragma once

// The finite-difference suite: every differentiable layer, a full ResNet
// block, and a small end-to-end model, each checked on seeded random
// instances in double precision (weights, biases and inputs together).

#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "lseg/gradcheck.hpp"
#include "lseg/metrics.hpp"
#include "lseg/model.hpp"

namespace lseg {

enum class GradScope { layers, block, model };

inline GradScope parse_grad_scope(const std::string& s) {
    if (s == "layers") return GradScope::layers;
    if (s == "block") return GradScope::block;
    if (s == "model") return GradScope::model;
    throw ConfigError("unknown gradcheck scope '" + s + "' (expected layers, block or model)");
}

struct GradCase {
    std::string name;
    std::function<GradCheckResult(Rng&)> run;
};

struct GradCaseOutcome {
    std::string name;
    double max_error = 0.0;
    std::size_t instances = 0;
    std::size_t redraws = 0;  // instances rejected because a probe straddled a kink
    bool pass = false;
};

// A central difference across a relu zero or a max-pool switch does not
// estimate the derivative, so an instance where any probe changes branches is
// redrawn.
inline constexpr std::size_t kMaxRedraws = 64;

struct RedrawInstance {};

namespace gradsuite {

template <typename T = double>
GradCheckResult smooth_check(const std::type_identity_t<std::function<Var<T>()>>& f,
                             std::type_identity_t<std::vector<Var<T>>> vars) {
    const GradCheckResult r = grad_check_tensors<T>(f, std::move(vars), {1e-5, true});
    if (r.kink_crossings > 0) throw RedrawInstance{};
    return r;
}

template <typename T = double>
Var<T> random_leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return Var<T>(std::move(t), true);
}

// Relu inputs kept at least 0.05 away from the kink at 0.
inline Var<double> random_leaf_off_zero(Shape shape, Rng& rng) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) {
        const double m = rng.uniform(0.05, 1.0);
        v = rng.bernoulli(0.5) ? m : -m;
    }
    return Var<double>(std::move(t), true);
}

// Scalar probe <y, R> with a fixed random R, so every output element carries
// a distinct nonzero weight.
inline Var<double> project(const Var<double>& y, const Tensor<double>& r) { return sum(y * Var<double>(r)); }

inline Tensor<double> random_like(const Shape& shape, Rng& rng) {
    Tensor<double> t(shape);
    for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
    return t;
}

template <typename Op>
GradCheckResult check_unary(Rng& rng, Var<double> x, Op op) {
    const Shape out = [&] {
        NoGradGuard guard;
        return op(x).shape();
    }();
    const Tensor<double> r = random_like(out, rng);
    return smooth_check([&] { return project(op(x), r); }, {x});
}

inline Mask random_labels(Shape shape, std::size_t classes, Rng& rng) {
    Mask m(std::move(shape));
    for (auto& v : m.data()) v = static_cast<std::uint8_t>(rng.below(classes));
    return m;
}

inline std::vector<Var<double>> block_vars(ResNetBlock<double>& b) {
    std::vector<Var<double>> vars{b.bn.gamma, b.bn.beta};
    for (auto* layer : {&b.conv1, &b.conv2}) {
        if (auto* s = std::get_if<SeparableConv2dParams<double>>(&layer->params)) {
            vars.insert(vars.end(), {s->depthwise_weight, s->depthwise_bias, s->pointwise_weight, s->pointwise_bias});
        } else {
            auto& c = std::get<Conv2dParams<double>>(layer->params);
            vars.insert(vars.end(), {c.weight, c.bias});
        }
    }
    if (b.projection) vars.insert(vars.end(), {b.projection->weight, b.projection->bias});
    return vars;
}

// Batch-norm gamma/beta start at 1/0; randomizing them exercises the general case.
template <typename T>
void jitter_batch_norm(BatchNormParams<T>& bn, Rng& rng) {
    for (auto& v : bn.gamma.mutable_value().data()) v = rng.uniform(0.5, 1.5);
    for (auto& v : bn.beta.mutable_value().data()) v = rng.uniform(-0.5, 0.5);
}

inline GradCheckResult check_block(Rng& rng, bool separable) {
    ResNetBlockSpec spec;
    spec.in_channels = 8;
    spec.out_channels = 16;
    spec.kernel = 3;
    spec.separable = separable;
    auto block = make_resnet_block<double>(spec, rng);
    jitter_batch_norm(block.bn, rng);
    Var<double> x = random_leaf({1, 8, 8, 8}, rng);
    const Tensor<double> r = random_like({1, 16, 8, 8}, rng);
    const Rng dropout_rng = rng.substream(Stream::dropout);
    auto vars = block_vars(block);
    vars.push_back(x);
    // Train mode with a dropout mask fixed across evaluations.
    return smooth_check(
        [&] {
            Rng d = dropout_rng;
            return project(resnet_block_forward(block, x, Mode::train, 0.05, &d), r);
        },
        vars);
}

// Extended precision: with a few thousand weights, some gradient entries of
// the full model sit near 1e-8, where double roundoff in f exceeds the
// tolerance.
inline GradCheckResult check_model(Rng& rng) {
    using LD = long double;
    ModelSpec spec = ModelSpec::proposed(2);
    auto model = build_model<LD>(spec, rng);
    for (auto* b : {&model.encoder[0], &model.decoder[3]}) jitter_batch_norm(b->bn, rng);
    Var<LD> x = random_leaf<LD>({2, 1, 32, 32}, rng);
    const Mask labels = random_labels({2, 32, 32}, 2, rng);
    const ClassWeights w{{0.4, 1.6}};
    const Rng dropout_rng = rng.substream(Stream::dropout);
    std::vector<Var<LD>> vars = model.parameters();
    vars.push_back(x);
    return smooth_check<LD>(
        [&] {
            Rng d = dropout_rng;
            return weighted_cross_entropy(forward(model, x, Mode::train, &d), labels, w);
        },
        vars);
}

// relu whose backward rule doubles the gradient; must be caught.
inline Var<double> corrupted_relu(const Var<double>& x) {
    Tensor<double> y = x.value();
    for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
    return custom_op<double>(x, std::move(y), "corrupted_relu",
                             [](const Tensor<double>& g, const Tensor<double>& in, Tensor<double>& gin) {
                                 for (std::size_t i = 0; i < g.size(); ++i) gin[i] += in[i] > 0.0 ? 2.0 * g[i] : 0.0;
                             });
}

}  // namespace gradsuite

inline std::vector<GradCase> gradcheck_cases(GradScope scope, bool inject_fault = false) {
    using namespace gradsuite;
    std::vector<GradCase> cases;
    if (scope == GradScope::layers) {
        cases.push_back({"conv2d", [](Rng& rng) {
                             auto p = make_conv2d<double>(3, 4, 3, rng);
                             for (auto& v : p.bias.mutable_value().data()) v = rng.uniform(-0.5, 0.5);
                             Var<double> x = random_leaf({2, 3, 5, 5}, rng);
                             const Tensor<double> r = random_like({2, 4, 5, 5}, rng);
                             return smooth_check([&] { return project(conv2d(x, p), r); }, {x, p.weight, p.bias});
                         }});
        cases.push_back({"conv2d_stride2", [](Rng& rng) {
                             Var<double> w = random_leaf({2, 3, 3, 3}, rng);
                             Var<double> b = random_leaf({2}, rng);
                             Var<double> x = random_leaf({1, 3, 6, 6}, rng);
                             const Tensor<double> r = random_like({1, 2, 3, 3}, rng);
                             return smooth_check([&] { return project(conv2d(x, w, b, 2, 1), r); }, {x, w, b});
                         }});
        cases.push_back({"conv2d_1x1", [](Rng& rng) {
                             auto p = make_conv2d<double>(3, 4, 1, rng);
                             Var<double> x = random_leaf({2, 3, 4, 4}, rng);
                             const Tensor<double> r = random_like({2, 4, 4, 4}, rng);
                             return smooth_check([&] { return project(conv2d(x, p), r); }, {x, p.weight, p.bias});
                         }});
        cases.push_back({"separable_conv2d", [](Rng& rng) {
                             auto p = make_separable_conv2d<double>(3, 4, 3, rng);
                             for (auto& v : p.depthwise_bias.mutable_value().data()) v = rng.uniform(-0.5, 0.5);
                             Var<double> x = random_leaf({2, 3, 5, 5}, rng);
                             const Tensor<double> r = random_like({2, 4, 5, 5}, rng);
                             return smooth_check([&] { return project(separable_conv2d(x, p), r); },
                                                    {x, p.depthwise_weight, p.depthwise_bias, p.pointwise_weight,
                                                     p.pointwise_bias});
                         }});
        cases.push_back({"batch_norm", [](Rng& rng) {
                             auto p = make_batch_norm<double>(3);
                             jitter_batch_norm(p, rng);
                             Var<double> x = random_leaf({2, 3, 4, 4}, rng);
                             const Tensor<double> r = random_like({2, 3, 4, 4}, rng);
                             return smooth_check([&] { return project(batch_norm(x, p, Mode::train), r); },
                                                    {x, p.gamma, p.beta});
                         }});
        cases.push_back({"max_pool_2x2", [](Rng& rng) {
                             return check_unary(rng, random_leaf({2, 2, 4, 4}, rng),
                                                [](const Var<double>& v) { return max_pool_2x2(v); });
                         }});
        cases.push_back({"bilinear_upsample_2x", [](Rng& rng) {
                             return check_unary(rng, random_leaf({1, 2, 3, 3}, rng),
                                                [](const Var<double>& v) { return bilinear_upsample_2x(v); });
                         }});
        cases.push_back({"bilinear_resize", [](Rng& rng) {
                             return check_unary(rng, random_leaf({1, 2, 3, 4}, rng),
                                                [](const Var<double>& v) { return bilinear_resize(v, 5, 7); });
                         }});
        cases.push_back({"pixel_shuffle", [](Rng& rng) {
                             return check_unary(rng, random_leaf({1, 8, 3, 3}, rng),
                                                [](const Var<double>& v) { return pixel_shuffle(v, 2); });
                         }});
        cases.push_back({"relu", [](Rng& rng) {
                             return check_unary(rng, random_leaf_off_zero({2, 3, 4, 4}, rng),
                                                [](const Var<double>& v) { return relu(v); });
                         }});
        cases.push_back({"softmax_channels", [](Rng& rng) {
                             return check_unary(rng, random_leaf({2, 3, 4, 4}, rng, -2.0, 2.0),
                                                [](const Var<double>& v) { return softmax_channels(v); });
                         }});
        cases.push_back({"weighted_cross_entropy", [](Rng& rng) {
                             Var<double> logits = random_leaf({2, 2, 4, 4}, rng, -2.0, 2.0);
                             const Mask labels = random_labels({2, 4, 4}, 2, rng);
                             const ClassWeights w{{rng.uniform(0.2, 1.0), rng.uniform(1.0, 5.0)}};
                             return smooth_check(
                                 [&] { return weighted_cross_entropy(softmax_channels(logits), labels, w); }, {logits});
                         }});
        cases.push_back({"dropout", [](Rng& rng) {
                             const Rng mask_rng = rng.substream(Stream::dropout);
                             return check_unary(rng, random_leaf({2, 3, 4, 4}, rng), [&](const Var<double>& v) {
                                 Rng d = mask_rng;
                                 return dropout(v, DropoutParams{0.3}, Mode::train, d);
                             });
                         }});
        cases.push_back({"concat_channels", [](Rng& rng) {
                             Var<double> a = random_leaf({2, 2, 3, 3}, rng);
                             Var<double> b = random_leaf({2, 3, 3, 3}, rng);
                             const Tensor<double> r = random_like({2, 5, 3, 3}, rng);
                             return smooth_check([&] { return project(concat_channels(a, b), r); }, {a, b});
                         }});
        if (inject_fault) {
            cases.push_back({"corrupted_relu", [](Rng& rng) {
                                 return check_unary(rng, random_leaf_off_zero({2, 3, 4, 4}, rng),
                                                    [](const Var<double>& v) { return corrupted_relu(v); });
                             }});
        }
    } else if (scope == GradScope::block) {
        cases.push_back({"resnet_block_separable_8_16", [](Rng& rng) { return check_block(rng, true); }});
        cases.push_back({"resnet_block_standard_8_16", [](Rng& rng) { return check_block(rng, false); }});
    } else {
        cases.push_back({"model_proposed_base2", [](Rng& rng) { return check_model(rng); }});
    }
    return cases;
}

// Instance i of case c draws from substream (c, i) of the gradcheck stream;
// redraw k of it from (c, i, k).
inline std::vector<GradCaseOutcome> run_gradcheck(const std::vector<GradCase>& cases, std::size_t instances = 5,
                                                  double tolerance = 1e-4, std::uint64_t seed = 0) {
    std::vector<GradCaseOutcome> out;
    const Rng base(seed, Stream::gradcheck);
    for (std::size_t c = 0; c < cases.size(); ++c) {
        GradCaseOutcome o{cases[c].name, 0.0, instances, 0, true};
        for (std::size_t i = 0; i < instances; ++i) {
            double err = 0.0;
            for (std::size_t attempt = 0;; ++attempt) {
                Rng rng = attempt == 0 ? base.substream(c).substream(i) : base.substream(c).substream(i).substream(attempt);
                try {
                    err = cases[c].run(rng).max_relative_error;
                    break;
                } catch (const RedrawInstance&) {
                    ++o.redraws;
                    if (attempt + 1 >= kMaxRedraws) {
                        throw NumericError("gradcheck " + cases[c].name + ": no kink-free instance in " +
                                           std::to_string(kMaxRedraws) + " draws");
                    }
                }
            }
            if (!(err <= o.max_error)) o.max_error = err;  // NaN sticks
        }
        o.pass = o.max_error <= tolerance;
        out.push_back(o);
    }
    return out;
}

}  // namespace lseg
