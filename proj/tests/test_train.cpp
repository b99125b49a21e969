#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "helpers.hpp"

using namespace lseg;
using testing_util::max_abs_diff;
using testing_util::scratch_dir;

namespace {

TrainConfig small_config(std::size_t iterations) {
    TrainConfig c;
    c.iterations = iterations;
    c.batch_size = 2;
    c.eval_every = 3;
    c.seed = 5;
    return c;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
    Var<double> p(Tensor<double>({3}, {1, -2, 3}), true);
    std::vector<Var<double>> params{p};
    AdamState<double> st;
    for (int i = 0; i < 5; ++i) adam_step(params, st);
    EXPECT_EQ(st.t, 5u);
    EXPECT_EQ(p.value()[0], 1.0);
    EXPECT_EQ(p.value()[1], -2.0);
}

TEST(Adam, FirstStepIsAboutLr) {
    Var<double> p(Tensor<double>({1}, {0.5}), true);
    std::vector<Var<double>> params{p};
    AdamState<double> st;
    p.mutable_grad()[0] = 0.1;
    adam_step(params, st);
    const double first = 0.5 - p.value()[0];
    EXPECT_NEAR(first, 0.001 * 0.1 / (0.1 + 1e-8), 1e-15);
    const double before = p.value()[0];
    adam_step(params, st);
    const double second = before - p.value()[0];
    EXPECT_GT(second, 0.0);
    EXPECT_LT(second, 0.001);
    // m and v after two steps: m = 0.019, v = 1.999e-5 (times g^2 = 0.01 scale)
    EXPECT_NEAR(st.m[0][0], 0.9 * 0.01 + 0.01, 1e-15);
    EXPECT_NEAR(st.v[0][0], 0.999 * 1e-5 + 1e-5, 1e-18);
}

TEST(Adam, ZeroLearningRateIsIdentity) {
    Var<double> p(Tensor<double>({2}, {0.25, 4}), true);
    std::vector<Var<double>> params{p};
    AdamState<double> st(AdamConfig{0.0});
    p.mutable_grad()[0] = 3.0;
    p.mutable_grad()[1] = -0.7;
    for (int i = 0; i < 3; ++i) adam_step(params, st);
    EXPECT_EQ(p.value()[0], 0.25);
    EXPECT_EQ(p.value()[1], 4.0);
}

TEST(Adam, NonFiniteGradientAbortsBeforeUpdate) {
    Var<double> a(Tensor<double>({1}, {1}), true), b(Tensor<double>({1}, {2}), true);
    std::vector<Var<double>> params{a, b};
    const std::vector<std::string> names{"alpha", "beta"};
    AdamState<double> st;
    a.mutable_grad()[0] = 1.0;
    b.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        adam_step(params, st, &names);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos);
    }
    EXPECT_EQ(a.value()[0], 1.0);
    EXPECT_EQ(st.t, 0u);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
    Var<double> a(Tensor<double>({2}), true);
    a.mutable_grad()[0] = 3.0;
    a.mutable_grad()[1] = 4.0;
    std::vector<Var<double>> params{a};
    EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
    EXPECT_DOUBLE_EQ(a.grad()[0], 0.6);
    EXPECT_DOUBLE_EQ(clip_grad_norm(params, 10.0), 1.0);
    EXPECT_DOUBLE_EQ(a.grad()[1], 0.8);
}

TEST(KFold, EightVolumesFourFolds) {
    const auto data = generate_phantom(Rng(1), 16, 8);
    const Split s = kfold_split(data, 4, 0, 3);
    EXPECT_EQ(s.train_volumes.size(), 6u);
    EXPECT_EQ(s.validation_volumes.size(), 2u);
    const Split again = kfold_split(data, 4, 0, 3);
    EXPECT_EQ(s.validation_volumes, again.validation_volumes);
    EXPECT_EQ(s.train.size() + s.validation.size(), data.size());
}

TEST(KFold, ValidationSetsPartitionVolumes) {
    std::vector<std::string> ids;
    for (int i = 0; i < 11; ++i) ids.push_back("v" + std::to_string(i));
    const auto folds = kfold_volumes(ids, 4, 9);
    std::multiset<std::string> seen;
    for (const auto& f : folds) seen.insert(f.begin(), f.end());
    EXPECT_EQ(seen, std::multiset<std::string>(ids.begin(), ids.end()));
    // Volume granularity: slices of one volume never straddle the split.
    std::vector<SliceSample> data;
    for (const auto& v : {phantom_volume(Rng(1), 16, 3, "x"), phantom_volume(Rng(2), 16, 2, "y"),
                          phantom_volume(Rng(3), 16, 2, "z")}) {
        DatasetOptions o;
        o.resize = 16;
        for (auto& s : build_slice_dataset({v}, o)) data.push_back(std::move(s));
    }
    for (std::size_t f = 0; f < 3; ++f) {
        const Split s = kfold_split(data, 3, f, 1);
        std::set<std::string> tr, va;
        for (const auto& x : s.train) tr.insert(x.volume_id);
        for (const auto& x : s.validation) va.insert(x.volume_id);
        for (const auto& id : va) EXPECT_EQ(tr.count(id), 0u);
    }
    EXPECT_THROW(kfold_volumes({"a", "b"}, 4, 0), DataError);
}

TEST(Batches, IncludeALesionSlice) {
    std::vector<SliceSample> samples(50);
    std::vector<std::size_t> lesion{17};
    samples[17].has_lesion = true;
    for (std::uint64_t it = 0; it < 100; ++it) {
        Rng r = Rng(0, Stream::batch).substream(it);
        const auto idx = draw_batch(samples, lesion, 4, r);
        bool any = false;
        for (auto i : idx) any = any || samples[i].has_lesion;
        EXPECT_TRUE(any);
    }
}

TEST(Train, ZeroLearningRateKeepsParameters) {
    const auto data = generate_phantom(Rng(2), 32, 4);
    TrainConfig cfg = small_config(4);
    cfg.lr = 0.0;
    auto r = train(ModelSpec::proposed(4), cfg, data, {});
    Rng init(cfg.seed, Stream::init);
    ModelSpec spec = ModelSpec::proposed(4);
    spec.dropout = cfg.dropout;
    auto fresh = build_model<float>(spec, init);
    auto a = fresh.entries(), b = r.final_model.entries();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].learnable()) {
            EXPECT_EQ(max_abs_diff(a[i].tensor(), b[i].tensor()), 0.0) << a[i].name;
        }
    }
}

TEST(Train, DeterministicLogsAndCheckpoints) {
    const auto data = generate_phantom(Rng(3), 32, 8);
    std::string logs[2], ckpts[2];
    for (int run = 0; run < 2; ++run) {
        const auto dir = scratch_dir("det" + std::to_string(run));
        TrainConfig cfg = small_config(6);
        cfg.log_path = dir / "log.csv";
        cfg.best_checkpoint_path = dir / "best.ckpt";
        train(ModelSpec::proposed(4), cfg, data);
        logs[run] = slurp(dir / "log.csv");
        ckpts[run] = slurp(dir / "best.ckpt");
    }
    EXPECT_EQ(logs[0], logs[1]);
    EXPECT_EQ(ckpts[0], ckpts[1]);
    EXPECT_EQ(std::count(logs[0].begin(), logs[0].end(), '\n'), 7);
}

TEST(Train, BestCheckpointHasMaximumValidationDice) {
    const auto data = generate_phantom(Rng(4), 32, 8);
    TrainConfig cfg = small_config(12);
    cfg.eval_every = 2;
    cfg.augment = false;
    auto r = train(ModelSpec::proposed(4), cfg, data);
    double best = -1.0;
    std::size_t first = 0;
    for (const auto& rec : r.log) {
        if (rec.val_dice && *rec.val_dice > best) {
            best = *rec.val_dice;
            first = rec.iteration;
        }
    }
    ASSERT_TRUE(r.best_val_dice.has_value());
    EXPECT_EQ(*r.best_val_dice, best);
    EXPECT_EQ(r.best_iteration, first);
    const Split s = kfold_split(data, cfg.folds, cfg.fold_index, cfg.seed);
    EXPECT_EQ(evaluate(r.best, s.validation).global_dice(), best);
    for (std::size_t i = 0; i + 1 < r.log.size(); ++i) EXPECT_EQ(r.log[i].iteration + 1, r.log[i + 1].iteration);
}

TEST(Train, NonFiniteLossNamesIterationAndBatch) {
    auto data = generate_phantom(Rng(5), 32, 2);
    Rng rng(1);
    auto m = build_model<float>(ModelSpec::proposed(4), rng);
    m.head.bias.mutable_value()[0] = std::numeric_limits<float>::infinity();
    m.head.bias.mutable_value()[1] = std::numeric_limits<float>::infinity();
    auto params = m.parameters();
    AdamState<float> adam;
    std::vector<const SliceSample*> ptrs{&data[0], &data[1]};
    Rng drop(0);
    try {
        train_detail::step(m, params, adam, train_detail::learnable_names(m), stack_images<float>(ptrs),
                           stack_labels(ptrs), ClassWeights::uniform(2), 5.0, drop, 42, "phantom-000#0, phantom-001#0");
        FAIL();
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("iteration 42"), std::string::npos);
        EXPECT_NE(msg.find("phantom-001#0"), std::string::npos);
    }
}

TEST(Train, FixedBatchLossDecreases) {
    const auto data = generate_phantom(Rng(6), 32, 4);
    Rng init(0, Stream::init);
    auto m = build_model<float>(ModelSpec::proposed(4), init);
    TrainConfig cfg;
    const auto losses = fixed_batch_losses(m, data, cfg, 10);
    for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LT(losses[i], losses[i - 1]) << i;
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.folds = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    EXPECT_DOUBLE_EQ(c.val_fraction(), 0.25);
}
