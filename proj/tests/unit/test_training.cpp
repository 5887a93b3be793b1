#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fixtures.hpp"
#include "mobileage/training.hpp"

using namespace mobileage;

namespace {

// Scalar oracles, written independently of the library.
double smooth_l1_oracle(double pred, double target)
{
    const double t = target < 1.0 ? 1.0 : (target > 95.0 ? 95.0 : target);
    const double d = std::fabs(pred - t);
    return d < 1.0 ? 0.5 * d * d : d - 0.5;
}

double cosine_oracle(double t, double T, double hi, double lo) { return lo + (hi - lo) * (1 + std::cos(std::numbers::pi * t / T)) / 2; }

std::vector<double> random_ages(Rng& rng, std::size_t n)
{
    static const double edges[]{0, 1, 95, 116};
    std::vector<double> v(n);
    for (auto& x : v) x = rng.bernoulli(0.3) ? edges[rng.below(4)] : rng.uniform(0, 116);
    return v;
}

TrainSpec quick_spec()
{
    TrainSpec ts;
    ts.lr = 2e-3;
    ts.batch_size = 8;
    ts.epochs = 3;
    ts.freeze_epochs = 1;
    ts.seed = 9;
    ts.transform = "norm_256";
    return ts;
}

bool same_tensors(const TensorMap& a, const TensorMap& b)
{
    if (a.size() != b.size()) return false;
    for (const auto& [k, v] : a)
        if (!b.contains(k) || b.at(k).storage() != v.storage()) return false;
    return true;
}

} // namespace

TEST(Loss, SpecExamples)
{
    auto one = [](double p, double t) { return smooth_l1_loss(std::vector{p}, std::vector{t}, 1.0, 1.0, 95.0).value; };
    EXPECT_EQ(one(30, 30), 0.0);
    EXPECT_DOUBLE_EQ(one(30, 30.5), 0.125);
    EXPECT_DOUBLE_EQ(one(10, 0), 8.5);
    EXPECT_DOUBLE_EQ(one(100, 116), 4.5);
}

TEST(Loss, MatchesScalarOracleOnRandomBatches)
{
    Rng rng(1);
    for (int c = 0; c < 1000; ++c) {
        const auto n = 1 + rng.below(16);
        auto pred = random_ages(rng, n);
        const auto target = random_ages(rng, n);
        if (c % 5 == 0) pred = target; // zero residual, including clamped boundaries
        double want = 0;
        for (std::size_t i = 0; i < n; ++i) want += smooth_l1_oracle(pred[i], target[i]);
        want /= static_cast<double>(n);
        const auto got = smooth_l1_loss(pred, target, 1.0, 1.0, 95.0);
        ASSERT_NEAR(got.value, want, 1e-6) << "case " << c;
        for (std::size_t i = 0; i < n; ++i) {
            const double h = 1e-6;
            const double fd = (smooth_l1_oracle(pred[i] + h, target[i]) - smooth_l1_oracle(pred[i] - h, target[i])) / (2 * h * n);
            const double t = std::clamp(target[i], 1.0, 95.0);
            if (std::fabs(std::fabs(pred[i] - t) - 1.0) > 1e-5 && pred[i] != t) {
                ASSERT_NEAR(got.grad[i], fd, 1e-6) << "case " << c;
            }
        }
    }
}

TEST(Loss, NonFiniteIsFatalWithIndices)
{
    const std::vector<double> pred{1, std::nan(""), 3, INFINITY};
    const std::vector<double> target{1, 2, 3, 4};
    try {
        (void)smooth_l1_loss(pred, target, 1.0, 1.0, 95.0);
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("indices 1 3"), std::string::npos) << e.what();
    }
}

TEST(Schedule, CosineMatchesClosedForm)
{
    EXPECT_DOUBLE_EQ(cosine_lr(0, 10, 1e-3, 1e-5), 1e-3);
    EXPECT_DOUBLE_EQ(cosine_lr(10, 10, 1e-3, 1e-5), 1e-5);
    EXPECT_NEAR(cosine_lr(5, 10, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, 1e-18);
    Rng rng(2);
    for (int c = 0; c < 1000; ++c) {
        const auto T = static_cast<std::int64_t>(1 + rng.below(5000));
        const auto t = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(T) + 1));
        const double hi = rng.uniform(1e-5, 1e-1), lo = hi * rng.uniform(0, 1);
        ASSERT_NEAR(cosine_lr(t, T, hi, lo), cosine_oracle(t, T, hi, lo), 1e-6 * hi);
    }
    EXPECT_THROW(cosine_lr(0, 0, 1, 0), ConfigError);
    EXPECT_THROW(cosine_lr(11, 10, 1, 0), ConfigError);
}

TEST(Clip, ScalesOnlyAboveThreshold)
{
    std::vector<float> a{3, 4};
    std::vector<std::span<float>> g{a};
    EXPECT_DOUBLE_EQ(clip_gradients(g, 2.0), 5.0);
    EXPECT_FLOAT_EQ(a[0], 1.2F);
    EXPECT_FLOAT_EQ(a[1], 1.6F);

    std::vector<float> b{0.6F, 0.8F};
    std::vector<std::span<float>> gb{b};
    EXPECT_NEAR(clip_gradients(gb, 2.0), 1.0, 1e-7);
    EXPECT_EQ(b[0], 0.6F);

    std::vector<float> z(5, 0.0F);
    std::vector<std::span<float>> gz{z};
    EXPECT_EQ(clip_gradients(gz, 2.0), 0.0);

    std::vector<float> bad{1, NAN};
    std::vector<std::span<float>> gn{bad};
    EXPECT_THROW(clip_gradients(gn, 2.0), NumericalError);
}

TEST(Clip, MatchesOracleOverManyGroups)
{
    Rng rng(3);
    for (int c = 0; c < 1000; ++c) {
        std::vector<std::vector<float>> groups(1 + rng.below(4));
        double sq = 0;
        const double scale = c % 3 == 0 ? 0.1 : 3.0;
        for (auto& g : groups) {
            g.resize(1 + rng.below(20));
            for (auto& v : g) {
                v = static_cast<float>(scale * rng.normal());
                sq += static_cast<double>(v) * v;
            }
        }
        const auto before = groups;
        std::vector<std::span<float>> spans(groups.begin(), groups.end());
        const double norm = clip_gradients(spans, 2.0);
        ASSERT_NEAR(norm, std::sqrt(sq), 1e-6 * std::max(1.0, norm));
        const double f = norm > 2.0 ? 2.0 / std::sqrt(sq) : 1.0;
        for (std::size_t k = 0; k < groups.size(); ++k)
            for (std::size_t i = 0; i < groups[k].size(); ++i) ASSERT_NEAR(groups[k][i], before[k][i] * f, 1e-6);
    }
}

TEST(AdamW, StepMatchesScalarOracle)
{
    nn::Param w({3}, true), b({1}, false);
    w.value = Tensor({3}, {0.5F, -1.0F, 2.0F});
    b.value = Tensor({1}, {0.25F});
    std::vector<nn::NamedParam> ps{{"w", &w}, {"b", &b}};
    AdamW opt({{"g", ps, 0.01}}, {0.9, 0.999, 1e-8, 0.1});
    double ow[3]{0.5, -1.0, 2.0}, ob = 0.25, mw[3]{}, vw[3]{}, mb = 0, vb = 0;
    for (int step = 1; step <= 5; ++step) {
        const double gw[3]{0.1 * step, -0.3, 0.05}, gb = -0.2;
        for (int i = 0; i < 3; ++i) w.grad[i] = static_cast<float>(gw[i]);
        b.grad[0] = static_cast<float>(gb);
        opt.step();
        const double bc1 = 1 - std::pow(0.9, step), bc2 = 1 - std::pow(0.999, step);
        for (int i = 0; i < 3; ++i) {
            ow[i] *= 1 - 0.01 * 0.1;
            mw[i] = 0.9 * mw[i] + 0.1 * gw[i];
            vw[i] = 0.999 * vw[i] + 0.001 * gw[i] * gw[i];
            ow[i] -= 0.01 * (mw[i] / bc1) / (std::sqrt(vw[i] / bc2) + 1e-8);
            EXPECT_NEAR(w.value[i], ow[i], 1e-6);
        }
        mb = 0.9 * mb + 0.1 * gb;
        vb = 0.999 * vb + 0.001 * gb * gb;
        ob -= 0.01 * (mb / bc1) / (std::sqrt(vb / bc2) + 1e-8);
        EXPECT_NEAR(b.value[0], ob, 1e-6);
    }
}

TEST(CheckpointPolicy, StrictImprovementOnly)
{
    CheckpointPolicy p;
    EXPECT_TRUE(p.update(1, 5.0));
    EXPECT_FALSE(p.update(2, 5.0));
    EXPECT_TRUE(p.update(3, 4.0));
    EXPECT_FALSE(p.update(4, 4.5));
    EXPECT_EQ(p.best_epoch, 3);
    EXPECT_EQ(p.best_value, 4.0);
}

TEST(TrainSpec, DefaultsAndValidation)
{
    TrainSpec ts;
    EXPECT_EQ(ts.backbone_lr_mult, 0.10);
    EXPECT_EQ(ts.freeze_epochs, 5);
    EXPECT_EQ(ts.clip_norm, 2.0);
    EXPECT_EQ(ts.loss_beta, 1.0);
    EXPECT_NO_THROW(ts.validate());
    ts.freeze_epochs = 200;
    EXPECT_THROW(ts.validate(), ConfigError);
    ts = {};
    ts.transform = "nope";
    EXPECT_THROW(ts.validate(), ConfigError);
    const nlohmann::json j = TrainSpec{};
    EXPECT_EQ(j.get<TrainSpec>(), TrainSpec{});
}

class TrainingRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() { data_ = fixtures::small_data(40).release(); }
    static void TearDownTestSuite() { delete data_; }
    static fixtures::SmallData* data_;
};
fixtures::SmallData* TrainingRun::data_ = nullptr;

TEST_F(TrainingRun, StagesSchedulesAndSelection)
{
    auto m = fixtures::tiny_model(0.2);
    const auto backbone0 = m->backbone_state();
    auto ts = quick_spec();
    ts.epochs = 4;
    ts.freeze_epochs = 2;
    std::vector<TensorMap> backbone_after;
    RunOptions o;
    o.images = &data_->images;
    o.on_epoch = [&](const EpochRecord&, AgeModel& mm) { backbone_after.push_back(mm.backbone_state()); };
    const auto r = run(*m, *data_->data, ts, o);

    ASSERT_EQ(r.records.size(), 4U);
    EXPECT_TRUE(same_tensors(backbone_after[0], backbone0));
    EXPECT_TRUE(same_tensors(backbone_after[1], backbone0));
    EXPECT_FALSE(same_tensors(backbone_after[2], backbone0));

    const auto steps = (data_->data->split(Split::Train).size() + 7) / 8;
    for (const auto& rec : r.records) {
        const bool frozen = rec.epoch <= 2;
        EXPECT_EQ(rec.stage, frozen ? "frozen_backbone" : "full");
        EXPECT_EQ(rec.param_groups, frozen ? 1 : 2);
        const double t = static_cast<double>((frozen ? rec.epoch - 1 : rec.epoch - 3) * steps);
        EXPECT_NEAR(rec.lr_head, cosine_oracle(t, 2.0 * steps, ts.lr, ts.lr * 0.01), 1e-9);
        if (!frozen) {
            EXPECT_NEAR(rec.lr_backbone / rec.lr_head, 0.10, 1e-9);
        }
        EXPECT_GE(rec.val_mae, 0.0);
        EXPECT_TRUE(std::isfinite(rec.val_mae_deterministic));
    }
    double best = INFINITY;
    for (const auto& rec : r.records) best = std::min(best, rec.val_mae);
    EXPECT_EQ(r.policy.best_value, best);

    // the restored model reproduces the best value on revalidation
    const auto [mae, loss] = validate_epoch(*m, data_->data->split(Split::Val), data_->images, ts, r.policy.best_epoch, 32);
    EXPECT_NEAR(mae, r.policy.best_value, 1e-6);
    (void)loss;
}

TEST_F(TrainingRun, FreezeForWholeRunKeepsBackbone)
{
    auto m = fixtures::tiny_model();
    const auto before = m->backbone_state();
    auto ts = quick_spec();
    ts.epochs = ts.freeze_epochs = 2;
    RunOptions o;
    o.images = &data_->images;
    o.deterministic_val = false;
    (void)run(*m, *data_->data, ts, o);
    EXPECT_TRUE(same_tensors(m->backbone_state(), before));
}

TEST_F(TrainingRun, SeededRunsAreIdentical)
{
    auto ts = quick_spec();
    ts.epochs = 2;
    RunOptions o;
    o.images = &data_->images;
    o.deterministic_val = false;
    auto a = fixtures::tiny_model(0.2);
    auto b = fixtures::tiny_model(0.2);
    const auto ra = run(*a, *data_->data, ts, o);
    const auto rb = run(*b, *data_->data, ts, o);
    for (std::size_t i = 0; i < ra.records.size(); ++i) {
        EXPECT_EQ(ra.records[i].train_loss, rb.records[i].train_loss);
        EXPECT_EQ(ra.records[i].val_mae, rb.records[i].val_mae);
    }
    EXPECT_TRUE(same_tensors(a->state_dict(), b->state_dict()));
}

TEST_F(TrainingRun, ResumeMatchesUninterruptedRun)
{
    auto ts = quick_spec();
    ts.epochs = 3;
    ts.freeze_epochs = 1;
    RunOptions o;
    o.images = &data_->images;
    o.deterministic_val = false;
    o.restore_best = false;

    auto full = fixtures::tiny_model(0.1);
    o.out_dir = fixtures::scratch("resume_full");
    const auto rf = run(*full, *data_->data, ts, o);

    // interrupt after epoch 2, then pick up from last.ckpt
    struct Interrupted {};
    auto part = fixtures::tiny_model(0.1);
    o.out_dir = fixtures::scratch("resume_part");
    auto stop = o;
    stop.on_epoch = [](const EpochRecord& r, AgeModel&) {
        if (r.epoch == 2) throw Interrupted{};
    };
    EXPECT_THROW(run(*part, *data_->data, ts, stop), Interrupted);
    auto resumed = fixtures::tiny_model(0.1);
    o.resume = true;
    const auto rr = run(*resumed, *data_->data, ts, o);

    ASSERT_EQ(rr.records.size(), 3U);
    EXPECT_EQ(rr.records[2].train_loss, rf.records[2].train_loss);
    EXPECT_EQ(rr.records[2].val_mae, rf.records[2].val_mae);
    EXPECT_TRUE(same_tensors(resumed->state_dict(), full->state_dict()));

    const auto log = read_epoch_log(o.out_dir / "logs" / "epochs.jsonl");
    EXPECT_EQ(log.size(), 3U);
    EXPECT_TRUE(std::filesystem::exists(o.out_dir / "checkpoints" / "best.ckpt"));
    int tagged = 0;
    for (const auto& e : std::filesystem::directory_iterator(o.out_dir / "checkpoints"))
        tagged += e.path().filename().string().ends_with("_best.ckpt");
    EXPECT_EQ(tagged, 1);
}

TEST_F(TrainingRun, TestSplitIsNeverRead)
{
    AccessAudit audit;
    SplitDataset d(data_->samples, data_->data->manifest(), &audit);
    auto m = fixtures::tiny_model();
    auto ts = quick_spec();
    ts.epochs = 1;
    RunOptions o;
    o.images = &data_->images;
    (void)run(*m, d, ts, o);
    EXPECT_EQ(audit.reads(Split::Test), 0U);
    EXPECT_GT(audit.reads(Split::Train), 0U);
}
