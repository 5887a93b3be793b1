#include <gtest/gtest.h>

#include <memory>
#include <thread>

#include "mobileage/bench.hpp"

using namespace mobileage;
using namespace mobileage::bench;

namespace {

// Replays scripted timestamps.
struct ScriptClock {
    static constexpr bool is_steady = true;
    std::shared_ptr<std::vector<std::int64_t>> ticks;
    std::shared_ptr<std::size_t> pos = std::make_shared<std::size_t>(0);
    [[nodiscard]] std::int64_t now_us() const { return ticks->at((*pos)++); }
};

struct WallClock {
    static constexpr bool is_steady = false;
    [[nodiscard]] std::int64_t now_us() const { return 0; }
};

static_assert(MonotonicClock<ScriptClock>);
static_assert(MonotonicClock<SteadyClock>);

class StubBackend final : public Backend {
public:
    explicit StubBackend(int* calls, int sleep_ms = 0) : calls_(calls), sleep_ms_(sleep_ms) {}
    [[nodiscard]] std::string name() const override { return "stub"; }
    Tensor infer(const Tensor& x) override
    {
        ++*calls_;
        if (sleep_ms_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(sleep_ms_));
        EXPECT_EQ(x.shape(), (Shape{1, 3, 224, 224}));
        return Tensor({1, 1});
    }

private:
    int* calls_;
    int sleep_ms_;
};

std::function<std::unique_ptr<Backend>()> stub(int* calls, int sleep_ms = 0)
{
    return [=] { return std::make_unique<StubBackend>(calls, sleep_ms); };
}

ScriptClock script(std::int64_t init_us, const std::vector<std::int64_t>& run_us)
{
    auto t = std::make_shared<std::vector<std::int64_t>>();
    std::int64_t now = 1000;
    t->push_back(now);
    t->push_back(now += init_us);
    for (auto d : run_us) {
        t->push_back(now += 7);
        t->push_back(now += d);
    }
    return {t};
}

} // namespace

TEST(Bench, StatisticsMatchScalarOracle)
{
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const int runs = 1 + static_cast<int>(rng.below(40));
        std::vector<std::int64_t> us;
        for (int i = 0; i < runs; ++i) us.push_back(5000 + static_cast<std::int64_t>(rng.below(20000)));
        int calls = 0;
        const auto r = benchmark("stub", stub(&calls), runs, 3, script(25600, us));
        double s = 0;
        for (auto u : us) s += static_cast<double>(u) / 1000.0;
        const double mean = s / runs;
        double v = 0;
        for (auto u : us) v += (static_cast<double>(u) / 1000.0 - mean) * (static_cast<double>(u) / 1000.0 - mean);
        EXPECT_NEAR(r.avg_ms, mean, 1e-9);
        EXPECT_NEAR(r.std_ms, std::sqrt(v / runs), 1e-9);
        EXPECT_EQ(r.init_ms, 25.6);
        ASSERT_EQ(r.per_run_ms.size(), static_cast<std::size_t>(runs));
        EXPECT_EQ(r.runs, runs);
        EXPECT_EQ(calls, runs + 3);
    }
}

TEST(Bench, PopulationNotSampleStd)
{
    const auto [m, s] = mean_std(std::vector<double>{13.0, 15.8});
    EXPECT_NEAR(m, 14.4, 1e-12);
    EXPECT_NEAR(s, 1.4, 1e-12);
    EXPECT_THROW(mean_std(std::vector<double>{}), ConfigError);
}

TEST(Bench, SingleRunHasZeroStd)
{
    int calls = 0;
    const auto r = benchmark("stub", stub(&calls), 1, 0, script(10, {4321}));
    EXPECT_EQ(r.std_ms, 0.0);
    EXPECT_EQ(r.avg_ms, 4.321);
    EXPECT_EQ(calls, 1);
}

TEST(Bench, WarmupRunsAreExcluded)
{
    for (int warm : {0, 1, 3, 10}) {
        int calls = 0;
        const auto r = benchmark("stub", stub(&calls), 20, warm, script(10, std::vector<std::int64_t>(20, 1000)));
        EXPECT_EQ(r.per_run_ms.size(), 20U);
        EXPECT_EQ(calls, 20 + warm);
        EXPECT_EQ(r.warmup, warm);
    }
}

TEST(Bench, SleepingStubTimedByRealClock)
{
    int calls = 0;
    const auto r = benchmark("stub", stub(&calls, 10), 5, 1);
    EXPECT_GE(r.avg_ms, 10.0);
    EXPECT_LE(r.avg_ms, 13.0);
    for (double ms : r.per_run_ms) EXPECT_GE(ms, 10.0);
}

TEST(Bench, ClockRequirements)
{
    int calls = 0;
    EXPECT_THROW(benchmark("stub", stub(&calls), 3, 0, WallClock{}), ConfigError);
    EXPECT_THROW(benchmark("stub", stub(&calls), 2, 0, script(10, {100, -50})), NumericalError);
    EXPECT_THROW(benchmark("stub", stub(&calls), 0, 0, script(10, {})), ConfigError);
    EXPECT_THROW(benchmark("stub", stub(&calls), 1, -1, script(10, {1})), ConfigError);
}

TEST(Bench, ReportStructureIsDeterministic)
{
    int calls = 0;
    auto strip = [](const BenchReport& r) {
        nlohmann::json j = r;
        for (const auto* k : {"init_ms", "avg_ms", "std_ms", "per_run_ms"}) j.erase(k);
        return j;
    };
    const auto a = benchmark("deployment_graph", stub(&calls), 4, 2, script(10, {1, 2, 3, 4}));
    const auto b = benchmark("deployment_graph", stub(&calls), 4, 2, script(99, {9, 8, 7, 6}));
    EXPECT_EQ(strip(a), strip(b));
    EXPECT_EQ(a.input_shape, (Shape{1, 3, 224, 224}));
}

TEST(Budget, InclusiveBoundary)
{
    BenchReport r;
    r.avg_ms = 14.4;
    auto s = report_budget(r);
    EXPECT_TRUE(s.pass);
    EXPECT_NEAR(s.margin_ms, 15.6, 1e-12);
    r.avg_ms = 30.0;
    EXPECT_TRUE(report_budget(r).pass);
    EXPECT_EQ(report_budget(r).margin_ms, 0.0);
    r.avg_ms = 31.0;
    s = report_budget(r);
    EXPECT_FALSE(s.pass);
    EXPECT_EQ(s.margin_ms, -1.0);
    EXPECT_TRUE(report_budget(r, 40.0).pass);
}
