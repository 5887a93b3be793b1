#pragma once

#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/error.hpp"
#include "mobileage/evaluation.hpp"
#include "mobileage/parity.hpp"

namespace mobileage::bench {

/// Microsecond ticks from a clock that never goes backwards.
template <class C>
concept MonotonicClock = requires(C& c) {
    { c.now_us() } -> std::convertible_to<std::int64_t>;
    { C::is_steady } -> std::convertible_to<bool>;
};

struct SteadyClock {
    static constexpr bool is_steady = std::chrono::steady_clock::is_steady;
    [[nodiscard]] std::int64_t now_us() const
    {
        return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now().time_since_epoch()).count();
    }
};

struct BenchReport {
    std::string artifact;
    int runs = 0;
    int warmup = 0;
    double init_ms = 0.0;
    double avg_ms = 0.0;
    double std_ms = 0.0; // population
    std::vector<double> per_run_ms;
    Shape input_shape{1, 3, 224, 224};
    std::string host_descriptor;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BenchReport, artifact, runs, warmup, init_ms, avg_ms, std_ms, per_run_ms, input_shape, host_descriptor)

/// Mean and population standard deviation.
inline std::pair<double, double> mean_std(std::span<const double> v)
{
    if (v.empty()) throw ConfigError("statistics of an empty sample");
    const double n = static_cast<double>(v.size());
    const double mean = pairwise_sum(v) / n;
    std::vector<double> sq(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) sq[i] = (v[i] - mean) * (v[i] - mean);
    return {mean, std::sqrt(pairwise_sum(sq) / n)};
}

inline std::string host_descriptor()
{
    return "host cpu, " + std::to_string(std::max(1U, std::thread::hardware_concurrency())) + " hardware threads";
}

/// `factory` loads the artifact and returns a ready backend; its wall time
/// plus the first inference allocation is init_ms. Warmup runs are excluded.
template <MonotonicClock Clock = SteadyClock>
BenchReport benchmark(const std::string& artifact, const std::function<std::unique_ptr<Backend>()>& factory, int runs = 20, int warmup = 3,
                      Clock clock = {}, std::uint64_t input_seed = 0)
{
    if (!Clock::is_steady) throw ConfigError("benchmark needs a monotonic clock; wall-clock timing is not allowed");
    if (runs <= 0) throw ConfigError("runs must be positive");
    if (warmup < 0) throw ConfigError("warmup must be >= 0");

    BenchReport r;
    r.artifact = artifact;
    r.runs = runs;
    r.warmup = warmup;
    r.host_descriptor = host_descriptor();

    Tensor x(r.input_shape);
    Rng rng(derive_seed(input_seed, 0xBE9C));
    for (auto& v : x.values()) v = static_cast<float>(rng.normal());

    const auto t0 = clock.now_us();
    auto backend = factory();
    if (!backend) throw ConfigError("backend factory returned nothing");
    const auto t1 = clock.now_us();
    r.init_ms = static_cast<double>(t1 - t0) / 1000.0;

    for (int i = 0; i < warmup; ++i) (void)backend->infer(x);
    for (int i = 0; i < runs; ++i) {
        const auto a = clock.now_us();
        const auto y = backend->infer(x);
        const auto b = clock.now_us();
        if (b < a) throw NumericalError("clock went backwards");
        if (y.size() != 1) throw DataError(artifact + ": expected one output, got " + shape_str(y.shape()));
        r.per_run_ms.push_back(static_cast<double>(b - a) / 1000.0);
    }
    std::tie(r.avg_ms, r.std_ms) = mean_std(r.per_run_ms);
    return r;
}

struct BudgetSummary {
    double avg_ms = 0.0;
    double budget_ms = 30.0;
    bool pass = false;
    double margin_ms = 0.0; // budget - avg; negative when over
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BudgetSummary, avg_ms, budget_ms, pass, margin_ms)

/// Inclusive: an average exactly at the budget passes.
inline BudgetSummary report_budget(const BenchReport& b, double budget_ms = 30.0)
{
    return {b.avg_ms, budget_ms, b.avg_ms <= budget_ms, budget_ms - b.avg_ms};
}

/// Reference numbers from the published device measurement (not asserted).
struct DeviceReference {
    double init_ms = 25.6;
    double avg_ms = 14.4;
    double std_ms = 1.4;
    int runs = 20;
};

} // namespace mobileage::bench
