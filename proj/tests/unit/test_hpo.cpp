#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "fixtures.hpp"
#include "mobileage/hpo.hpp"

using namespace mobileage;
using namespace mobileage::hpo;

namespace {

// Outcomes scripted per trial id; anything unscripted completes with
// val_mae = 10 + id.
class ScriptedRunner final : public TrialRunner {
public:
    std::map<int, double> mae;
    std::set<int> fail;
    std::map<int, int> epochs;
    std::vector<TrialContext> seen;

    TrialOutcome run(const TrialContext& ctx) override
    {
        seen.push_back(ctx);
        if (fail.contains(ctx.trial_id)) throw NumericalError("diverged");
        const double v = mae.contains(ctx.trial_id) ? mae.at(ctx.trial_id) : 10.0 + ctx.trial_id;
        const int n = epochs.contains(ctx.trial_id) ? epochs.at(ctx.trial_id) : 3;
        TrialOutcome o;
        for (int e = 1; e <= n; ++e) {
            const double cur = v + (n - e);
            ctx.report(e, cur);
            o.curve.push_back(cur);
        }
        o.val_mae_best = v;
        o.best_epoch = n;
        o.epochs_run = n;
        return o;
    }
    std::optional<double> test_mae(int id) override { return 100.0 + id; }
};

SearchOptions opts(int budget)
{
    SearchOptions o;
    o.budget = budget;
    o.epoch_cap = 60;
    o.seed = 7;
    return o;
}

// Asymptotic Kolmogorov distribution tail.
double ks_p_value(double d, std::size_t n)
{
    const double sn = std::sqrt(static_cast<double>(n));
    const double lambda = (sn + 0.12 + 0.11 / sn) * d;
    double p = 0;
    for (int k = 1; k <= 100; ++k) p += 2 * ((k % 2) ? 1 : -1) * std::exp(-2.0 * k * k * lambda * lambda);
    return std::clamp(p, 0.0, 1.0);
}

} // namespace

TEST(SearchSpace, RangesAndLogUniformity)
{
    const SearchSpace space;
    std::vector<double> u;
    std::map<int, int> batches;
    std::map<std::string, int> tfs;
    for (int i = 0; i < 1000; ++i) {
        Rng rng(derive_seed(trial_seed(11, i), 0x5A3B1E));
        const auto c = space.sample(rng);
        ASSERT_GE(c.lr, 5e-4);
        ASSERT_LE(c.lr, 2e-3);
        ASSERT_GE(c.dropout, 0.10);
        ASSERT_LE(c.dropout, 0.30);
        ++batches[c.batch_size];
        ++tfs[c.transform];
        u.push_back((std::log(c.lr) - std::log(5e-4)) / (std::log(2e-3) - std::log(5e-4)));
    }
    std::sort(u.begin(), u.end());
    double d = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double n = static_cast<double>(u.size());
        d = std::max({d, (i + 1) / n - u[i], u[i] - i / n});
    }
    EXPECT_GT(ks_p_value(d, u.size()), 0.01) << "D = " << d;

    // raw lr is not uniform: a linear-scale KS test should reject
    std::vector<double> lin;
    for (double x : u) lin.push_back((std::exp(std::log(5e-4) + x * std::log(4.0)) - 5e-4) / 1.5e-3);
    double dl = 0;
    for (std::size_t i = 0; i < lin.size(); ++i) {
        const double n = static_cast<double>(lin.size());
        dl = std::max({dl, (i + 1) / n - lin[i], lin[i] - i / n});
    }
    EXPECT_LT(ks_p_value(dl, lin.size()), 0.01);

    EXPECT_EQ(batches.size(), 2U);
    EXPECT_TRUE(batches.contains(64) && batches.contains(128));
    EXPECT_EQ(tfs.size(), 3U);
}

TEST(SearchSpace, SampledConfigsSatisfySpecInvariants)
{
    const SearchSpace space;
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const auto c = space.sample(rng);
        ModelSpec m;
        m.dropout = c.dropout;
        TrainSpec t;
        t.lr = c.lr;
        t.batch_size = c.batch_size;
        t.transform = c.transform;
        EXPECT_NO_THROW(m.validate());
        EXPECT_NO_THROW(t.validate());
    }
}

TEST(Search, BudgetOneSelectsThatTrial)
{
    ScriptedRunner r;
    const auto s = search({}, r, opts(1));
    ASSERT_EQ(s.trials.size(), 1U);
    EXPECT_EQ(s.best_trial_id, 0);
    EXPECT_EQ(s.best_config, s.trials[0].config);
}

TEST(Search, TiesGoToLowerTrialId)
{
    ScriptedRunner r;
    r.mae = {{0, 6.0}, {1, 5.0}, {2, 5.0}, {3, 5.5}};
    EXPECT_EQ(search({}, r, opts(4)).best_trial_id, 1);
    std::vector<TrialRecord> t(3);
    t[0].trial_id = 9;
    t[1].trial_id = 4;
    t[2].trial_id = 6;
    for (auto& x : t) {
        x.val_mae_best = 3.0;
        x.status = TrialStatus::Complete;
    }
    EXPECT_EQ(select_best(t), 4);
}

TEST(Search, FailedTrialsAreRecordedAndNeverSelected)
{
    ScriptedRunner r;
    r.mae = {{0, 9.0}, {1, 1.0}, {2, 8.0}};
    r.fail = {1};
    const auto s = search({}, r, opts(3));
    EXPECT_EQ(s.trials[1].status, TrialStatus::Failed);
    EXPECT_EQ(s.trials[1].error, "diverged");
    EXPECT_EQ(s.best_trial_id, 2);
}

TEST(Search, ZeroCompleteTrialsIsFatal)
{
    ScriptedRunner r;
    r.fail = {0, 1};
    EXPECT_THROW(search({}, r, opts(2)), NumericalError);
}

TEST(Search, EpochCapIsEnforced)
{
    ScriptedRunner r;
    r.epochs = {{0, 61}};
    r.mae = {{1, 50.0}};
    const auto s = search({}, r, opts(2));
    EXPECT_EQ(s.trials[0].status, TrialStatus::Failed);
    for (const auto& t : s.trials) {
        if (t.status == TrialStatus::Complete) {
            EXPECT_LE(t.epochs_run, 60);
        }
    }
    for (const auto& ctx : r.seen) EXPECT_EQ(ctx.epoch_cap, 60);
}

TEST(Search, ReplayIsDeterministicAndSeedsDerive)
{
    ScriptedRunner a, b;
    const auto sa = search({}, a, opts(5));
    const auto sb = search({}, b, opts(5));
    EXPECT_EQ(study_to_json(sa), study_to_json(sb));
    for (int i = 0; i < 5; ++i) EXPECT_EQ(sa.trials[i].seed, trial_seed(7, i));
}

TEST(Search, MedianPruningIsOffByDefault)
{
    ScriptedRunner r;
    r.mae = {{0, 1.0}, {1, 30.0}};
    r.epochs = {{0, 20}, {1, 20}};
    auto o = opts(2);
    EXPECT_EQ(search({}, r, o).trials[1].status, TrialStatus::Complete);
    o.median_pruning = true;
    ScriptedRunner r2 = r;
    const auto s = search({}, r2, o);
    EXPECT_EQ(s.trials[1].status, TrialStatus::Pruned);
    EXPECT_EQ(s.best_trial_id, 0);
}

TEST(Search, TestMaeLoggedOnlyAfterSelection)
{
    ScriptedRunner r;
    auto o = opts(3);
    o.log_test_mae = true;
    AccessAudit audit;
    const auto s = search({}, r, o, &audit);
    EXPECT_EQ(s.test_reads_at_selection, 0U);
    for (const auto& t : s.trials) EXPECT_EQ(t.test_mae, 100.0 + t.trial_id);
}

TEST(StudyRecord, RoundTripAndTamperDetection)
{
    ScriptedRunner r;
    const auto s = search({}, r, opts(4));
    const auto dir = fixtures::scratch("study");
    save_study(dir / "study.json", s);
    EXPECT_EQ(study_to_json(load_study(dir / "study.json")), study_to_json(s));

    std::ifstream in(dir / "study.json");
    std::string text((std::istreambuf_iterator<char>(in)), {});
    const auto pos = text.find("\"val_mae_best\"");
    ASSERT_NE(pos, std::string::npos);
    text.replace(text.find_first_of("0123456789", pos), 1, "9");
    std::ofstream(dir / "study.json") << text;
    try {
        (void)load_study(dir / "study.json");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("checksum mismatch"), std::string::npos);
    }
    EXPECT_THROW(load_study(dir / "missing.json"), Error);
}

TEST(Locked, PaperConfigFields)
{
    const auto c = paper_locked_config();
    EXPECT_EQ(c.train.lr, 0.0014162);
    EXPECT_EQ(c.train.batch_size, 64);
    EXPECT_EQ(c.model.dropout, 0.18074);
    EXPECT_EQ(c.train.backbone_lr_mult, 0.10);
    EXPECT_EQ(c.train.epochs, 100);
    EXPECT_EQ(c.train.freeze_epochs, 5);
    EXPECT_EQ(c.train.transform, "resize_colorjit_flip_blur");
}

TEST(Locked, LockCopiesSelectedTrialAndDetectsTampering)
{
    ScriptedRunner r;
    r.mae = {{2, 1.0}};
    const auto s = search({}, r, opts(4));
    const auto c = lock_config(s, ModelSpec{}, TrainSpec{});
    EXPECT_EQ(c.source_trial_id, 2);
    EXPECT_EQ(c.train.lr, s.trials[2].config.lr);
    EXPECT_EQ(c.model.dropout, s.trials[2].config.dropout);
    EXPECT_EQ(c.train.epochs, 100);

    const auto dir = fixtures::scratch("locked");
    save_locked(dir / "locked.json", c);
    const auto back = load_locked(dir / "locked.json");
    EXPECT_EQ(back.train, c.train);
    EXPECT_EQ(back.model, c.model);

    auto j = nlohmann::json::parse(std::ifstream(dir / "locked.json"));
    j["train"]["lr"] = 0.5;
    std::ofstream(dir / "locked.json") << j.dump(2);
    EXPECT_THROW(load_locked(dir / "locked.json"), ConfigError);
}

TEST(Locked, FinalizeRunsOnceAndAuditsTest)
{
    auto d = fixtures::small_data(500, 12, 48);
    auto locked = paper_locked_config();
    locked.model.backbone = "tiny";
    locked.train.epochs = 2;
    locked.train.freeze_epochs = 1;
    locked.train.batch_size = 64;
    const auto dir = fixtures::scratch("finalize");
    AccessAudit audit;
    SplitDataset data(d->samples, d->data->manifest(), &audit);
    FinalizeOptions o;
    o.registry = dir / "locked_runs.json";
    o.out_dir = dir / "run";
    const auto rep = finalize(locked, fixtures::tiny_backbone().tensors, data, d->images, o, audit);
    EXPECT_EQ(rep.epochs, 2U);
    EXPECT_FALSE(rep.test_evaluated_before_selection);
    EXPECT_EQ(rep.test_reads_before_selection, 0U);
    EXPECT_GT(audit.reads(Split::Test), 0U);
    EXPECT_TRUE(std::filesystem::exists(dir / "run" / "checkpoints" / "best.ckpt"));
    EXPECT_TRUE(std::isfinite(rep.test_mae));

    EXPECT_THROW(finalize(locked, fixtures::tiny_backbone().tensors, data, d->images, o, audit), ConfigError);
    o.force = true;
    EXPECT_THROW(finalize(locked, fixtures::tiny_backbone().tensors, data, d->images, o, audit), ConfigError);
    EXPECT_EQ(locked_runs(o.registry), std::vector<std::string>{"final"});
}
