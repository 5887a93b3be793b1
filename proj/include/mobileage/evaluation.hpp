#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/dataset.hpp"
#include "mobileage/model.hpp"
#include "mobileage/transforms.hpp"

namespace mobileage {

/// Anything that maps a normalized (N, 3, 224, 224) batch to N ages.
class Predictor {
public:
    virtual ~Predictor() = default;
    virtual std::vector<double> predict(const Tensor& batch) = 0;
};

/// EVAL-mode forward of an AgeModel.
class ModelPredictor final : public Predictor {
public:
    explicit ModelPredictor(AgeModel& m) : model_(m) {}
    std::vector<double> predict(const Tensor& batch) override
    {
        const Mode saved = model_.mode();
        model_.set_mode(Mode::Eval);
        auto out = model_.forward(batch);
        model_.set_mode(saved);
        return out;
    }

private:
    AgeModel& model_;
};

/// Sum in a fixed binary-tree order so the result depends only on the
/// sequence, not on how it was produced.
inline double pairwise_sum(std::span<const double> v)
{
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const auto half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

inline double mean_absolute_error(std::span<const double> pred, std::span<const double> target)
{
    if (pred.size() != target.size() || pred.empty()) throw ConfigError("MAE needs equally sized, non-empty inputs");
    std::vector<double> err(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) err[i] = std::abs(pred[i] - target[i]);
    return pairwise_sum(err) / static_cast<double>(err.size());
}

struct Prediction {
    std::string id;
    double pred = 0.0;
    double target = 0.0;

    friend bool operator==(const Prediction&, const Prediction&) = default;
};

struct EvalReport {
    std::string split;
    std::size_t n = 0;
    double mae = 0.0;
    std::map<int, double> per_bin_mae;
    std::map<int, std::size_t> per_bin_count;
    std::vector<Prediction> predictions;
    std::vector<std::pair<std::string, std::string>> failures;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline void to_json(nlohmann::json& j, const EvalReport& r)
{
    nlohmann::json bins = nlohmann::json::object();
    for (const auto& [b, m] : r.per_bin_mae) bins[std::to_string(b)] = {{"mae", m}, {"count", r.per_bin_count.at(b)}};
    nlohmann::json preds = nlohmann::json::array();
    for (const auto& p : r.predictions) preds.push_back({p.id, p.pred, p.target});
    nlohmann::json fails = nlohmann::json::array();
    for (const auto& [id, why] : r.failures) fails.push_back({{"id", id}, {"error", why}});
    j = {{"split", r.split}, {"n", r.n}, {"mae", r.mae}, {"per_bin", bins}, {"predictions", preds}, {"failures", fails}};
}

/// Fill n, mae and the per-bin breakdown from `predictions`.
inline void summarize(EvalReport& r)
{
    r.n = r.predictions.size();
    if (r.n == 0) throw DataError("evaluation produced no predictions for split " + r.split);
    std::vector<double> pred, target;
    std::map<int, std::vector<double>> by_bin;
    for (const auto& p : r.predictions) {
        pred.push_back(p.pred);
        target.push_back(p.target);
        by_bin[age_bin(p.target)].push_back(std::abs(p.pred - p.target));
    }
    r.mae = mean_absolute_error(pred, target);
    r.per_bin_mae.clear();
    r.per_bin_count.clear();
    for (const auto& [b, errs] : by_bin) {
        r.per_bin_mae[b] = pairwise_sum(errs) / static_cast<double>(errs.size());
        r.per_bin_count[b] = errs.size();
    }
}

struct EvalOptions {
    TransformSpec transform = make_transform(TransformKind::EvalDeterministic);
    std::size_t batch_size = 32;
    std::uint64_t seed = 0; // only used by stochastic transforms
};

/// Per-sample transform rng: depends on the seed and the sample's position
/// in canonical order, never on batching.
inline Rng sample_rng(std::uint64_t seed, std::uint64_t stream, std::size_t index)
{
    return Rng(derive_seed(seed, stream, index));
}

/// Evaluate on `samples` in id order against unclamped targets. Samples
/// whose image cannot be loaded are recorded as failures and excluded.
inline EvalReport evaluate(Predictor& predictor, std::vector<Sample> samples, const ImageSource& images,
                           const std::string& split_label, const EvalOptions& opt = {})
{
    if (samples.empty()) throw DataError("split '" + split_label + "' is empty");
    if (opt.batch_size == 0) throw ConfigError("batch size must be positive");
    std::sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
    EvalReport report;
    report.split = split_label;
    for (std::size_t start = 0; start < samples.size(); start += opt.batch_size) {
        const std::size_t end = std::min(samples.size(), start + opt.batch_size);
        std::vector<Tensor> inputs;
        std::vector<const Sample*> ok;
        for (std::size_t i = start; i < end; ++i) {
            try {
                Rng rng = sample_rng(opt.seed, 0xE7A1, i);
                inputs.push_back(apply(opt.transform, images.load(samples[i]), rng));
                ok.push_back(&samples[i]);
            } catch (const DataError& e) {
                report.failures.emplace_back(samples[i].id, e.what());
            }
        }
        if (inputs.empty()) continue;
        const auto ages = predictor.predict(stack(inputs));
        for (std::size_t k = 0; k < ok.size(); ++k) report.predictions.push_back({ok[k]->id, ages[k], ok[k]->age});
    }
    summarize(report);
    return report;
}

inline EvalReport evaluate(Predictor& predictor, const SplitDataset& data, Split split, const ImageSource& images,
                           const EvalOptions& opt = {})
{
    return evaluate(predictor, data.split(split), images, std::string(split_name(split)), opt);
}

struct DiagnosticFiles {
    std::filesystem::path scatter;
    std::filesystem::path histogram;
};

/// Two-column plain-text diagnostics: (target, pred) scatter rows and a
/// five-year-bin histogram of predictions.
inline DiagnosticFiles emit_diagnostics(const EvalReport& r, const std::filesystem::path& dir, const std::string& stem = "")
{
    std::filesystem::create_directories(dir);
    const std::string base = stem.empty() ? r.split : stem;
    DiagnosticFiles f{dir / (base + "_scatter.tsv"), dir / (base + "_histogram.tsv")};
    {
        std::ofstream out(f.scatter);
        out.precision(17);
        out << "target\tpred\n";
        for (const auto& p : r.predictions) out << p.target << '\t' << p.pred << '\n';
    }
    std::map<int, std::size_t> hist;
    for (const auto& p : r.predictions) ++hist[static_cast<int>(std::floor(p.pred / kBinWidth))];
    {
        std::ofstream out(f.histogram);
        out << "bin_start\tcount\n";
        for (const auto& [b, c] : hist) out << b * kBinWidth << '\t' << c << '\n';
    }
    return f;
}

} // namespace mobileage
