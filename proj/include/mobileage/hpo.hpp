#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/checksum.hpp"
#include "mobileage/training.hpp"

namespace mobileage::hpo {

struct TrialConfig {
    double lr = 1e-3;
    double dropout = 0.2;
    int batch_size = 64;
    std::string transform{transform_name(TransformKind::Norm256Flip)};
    friend bool operator==(const TrialConfig&, const TrialConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrialConfig, lr, dropout, batch_size, transform)

/// lr log-uniform, dropout uniform, batch size and pipeline categorical.
struct SearchSpace {
    double lr_min = 5e-4;
    double lr_max = 2e-3;
    double dropout_min = 0.10;
    double dropout_max = 0.30;
    std::vector<int> batch_sizes{64, 128};
    std::vector<std::string> transforms{std::string(transform_name(TransformKind::Norm256)),
                                        std::string(transform_name(TransformKind::Norm256Flip)),
                                        std::string(transform_name(TransformKind::ResizeColorJitFlipBlur))};
    int freeze_epochs = 5;
    double backbone_lr_mult = 0.10;

    void validate() const
    {
        if (!(lr_min > 0.0 && lr_min <= lr_max)) throw ConfigError("search space: need 0 < lr_min <= lr_max");
        if (!(dropout_min >= 0.0 && dropout_min <= dropout_max && dropout_max < 1.0))
            throw ConfigError("search space: need 0 <= dropout_min <= dropout_max < 1");
        if (batch_sizes.empty()) throw ConfigError("search space: batch_sizes is empty");
        for (int b : batch_sizes)
            if (b <= 0) throw ConfigError("search space: batch sizes must be positive");
        if (transforms.empty()) throw ConfigError("search space: transforms is empty");
        for (const auto& t : transforms) (void)parse_transform(t);
    }

    [[nodiscard]] TrialConfig sample(Rng& rng) const
    {
        TrialConfig c;
        c.lr = std::exp(rng.uniform(std::log(lr_min), std::log(lr_max)));
        c.lr = std::clamp(c.lr, lr_min, lr_max);
        c.dropout = rng.uniform(dropout_min, dropout_max);
        c.batch_size = batch_sizes[rng.below(batch_sizes.size())];
        c.transform = transforms[rng.below(transforms.size())];
        return c;
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SearchSpace, lr_min, lr_max, dropout_min, dropout_max, batch_sizes, transforms, freeze_epochs,
                                   backbone_lr_mult)

enum class TrialStatus { Complete, Pruned, Failed };

NLOHMANN_JSON_SERIALIZE_ENUM(TrialStatus, {{TrialStatus::Complete, "COMPLETE"}, {TrialStatus::Pruned, "PRUNED"}, {TrialStatus::Failed, "FAILED"}})

struct TrialRecord {
    int trial_id = 0;
    std::uint64_t seed = 0;
    TrialConfig config;
    double val_mae_best = std::numeric_limits<double>::infinity();
    std::optional<double> test_mae;
    int epochs_run = 0;
    int best_epoch = 0;
    std::vector<double> curve; // val MAE per epoch
    TrialStatus status = TrialStatus::Failed;
    std::string error;
};

inline void to_json(nlohmann::json& j, const TrialRecord& t)
{
    j = {{"trial_id", t.trial_id}, {"seed", t.seed},         {"config", t.config}, {"epochs_run", t.epochs_run},
         {"best_epoch", t.best_epoch}, {"curve", t.curve},   {"status", t.status}, {"error", t.error}};
    j["val_mae_best"] = std::isfinite(t.val_mae_best) ? nlohmann::json(t.val_mae_best) : nlohmann::json(nullptr);
    j["test_mae"] = t.test_mae ? nlohmann::json(*t.test_mae) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, TrialRecord& t)
{
    t.trial_id = j.at("trial_id").get<int>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.config = j.at("config").get<TrialConfig>();
    t.epochs_run = j.at("epochs_run").get<int>();
    t.best_epoch = j.at("best_epoch").get<int>();
    t.curve = j.at("curve").get<std::vector<double>>();
    t.status = j.at("status").get<TrialStatus>();
    t.error = j.at("error").get<std::string>();
    const auto& v = j.at("val_mae_best");
    t.val_mae_best = v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>();
    const auto& tm = j.at("test_mae");
    t.test_mae = tm.is_null() ? std::nullopt : std::optional<double>(tm.get<double>());
}

struct StudyRecord {
    std::string study_id;
    std::uint64_t seed = 0;
    int budget = 40;
    int epoch_cap = 60;
    SearchSpace space;
    std::vector<TrialRecord> trials;
    int best_trial_id = -1;
    TrialConfig best_config;
    double best_val_mae = std::numeric_limits<double>::infinity();
    std::size_t test_reads_at_selection = 0;
    std::string selection_metric = "val_mae_best";

    [[nodiscard]] const TrialRecord& best() const
    {
        for (const auto& t : trials)
            if (t.trial_id == best_trial_id) return t;
        throw ConfigError("study " + study_id + " has no selected trial");
    }
};

inline nlohmann::json study_body(const StudyRecord& s)
{
    return {{"study_id", s.study_id},
            {"seed", s.seed},
            {"budget", s.budget},
            {"epoch_cap", s.epoch_cap},
            {"space", s.space},
            {"trials", s.trials},
            {"best_trial_id", s.best_trial_id},
            {"best_config", s.best_config},
            {"best_val_mae", std::isfinite(s.best_val_mae) ? nlohmann::json(s.best_val_mae) : nlohmann::json(nullptr)},
            {"test_reads_at_selection", s.test_reads_at_selection},
            {"selection_metric", s.selection_metric}};
}

/// Checksums cover the compact dump of everything except the checksum itself.
inline std::string body_checksum(const nlohmann::json& body) { return sha256_hex(body.dump()); }

inline nlohmann::json study_to_json(const StudyRecord& s)
{
    auto j = study_body(s);
    j["checksum"] = body_checksum(j);
    return j;
}

inline StudyRecord study_from_json(const nlohmann::json& j)
{
    StudyRecord s;
    s.study_id = j.at("study_id").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.budget = j.at("budget").get<int>();
    s.epoch_cap = j.at("epoch_cap").get<int>();
    s.space = j.at("space").get<SearchSpace>();
    s.trials = j.at("trials").get<std::vector<TrialRecord>>();
    s.best_trial_id = j.at("best_trial_id").get<int>();
    s.best_config = j.at("best_config").get<TrialConfig>();
    s.best_val_mae = j.at("best_val_mae").is_null() ? std::numeric_limits<double>::infinity() : j.at("best_val_mae").get<double>();
    s.test_reads_at_selection = j.at("test_reads_at_selection").get<std::size_t>();
    s.selection_metric = j.at("selection_metric").get<std::string>();
    return s;
}

inline void save_study(const std::filesystem::path& path, const StudyRecord& s)
{
    const auto text = study_to_json(s).dump(2) + "\n";
    write_file_atomic(path, text);
}

inline nlohmann::json read_checked(const std::filesystem::path& path, const std::string& what, const std::string& producer)
{
    std::ifstream in(path);
    if (!in) throw DataError(what + " not found: " + path.string() + " (produce it with `mobileage " + producer + "`)");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(what + " " + path.string() + " is not valid JSON: " + e.what());
    }
    if (!j.contains("checksum")) throw ConfigError(what + " " + path.string() + " has no checksum");
    const auto stored = j.at("checksum").get<std::string>();
    j.erase("checksum");
    if (body_checksum(j) != stored) throw ConfigError(what + " " + path.string() + ": checksum mismatch (document was modified)");
    return j;
}

inline StudyRecord load_study(const std::filesystem::path& path) { return study_from_json(read_checked(path, "study record", "hpo-search")); }

// ---------------------------------------------------------------------------
// Search

/// Thrown by a trial runner when the pruner stops a trial early.
struct TrialPruned : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrialOutcome {
    double val_mae_best = std::numeric_limits<double>::infinity();
    int epochs_run = 0;
    int best_epoch = 0;
    std::vector<double> curve;
};

struct TrialContext {
    int trial_id = 0;
    std::uint64_t seed = 0;
    int epoch_cap = 60;
    TrialConfig config;
    /// Called after every epoch with the validation MAE; throws TrialPruned
    /// when the pruner is on and the trial is behind.
    std::function<void(int epoch, double val_mae)> report;
};

class TrialRunner {
public:
    virtual ~TrialRunner() = default;
    virtual TrialOutcome run(const TrialContext& ctx) = 0;
    /// Held-out MAE of a finished trial's best checkpoint, when available.
    virtual std::optional<double> test_mae(int /*trial_id*/) { return std::nullopt; }
};

struct SearchOptions {
    std::string study_id = "study";
    int budget = 40;
    int epoch_cap = 60;
    std::uint64_t seed = 0;
    bool median_pruning = false;
    int pruning_warmup_epochs = 10;
    bool log_test_mae = false; // evaluated only after selection is final
    std::function<void(const TrialRecord&)> on_trial;
};

/// Lowest val_mae_best among COMPLETE trials, ties to the lower trial id.
inline std::optional<int> select_best(const std::vector<TrialRecord>& trials)
{
    const TrialRecord* best = nullptr;
    for (const auto& t : trials) {
        if (t.status != TrialStatus::Complete || !std::isfinite(t.val_mae_best)) continue;
        if (!best || t.val_mae_best < best->val_mae_best || (t.val_mae_best == best->val_mae_best && t.trial_id < best->trial_id))
            best = &t;
    }
    if (!best) return std::nullopt;
    return best->trial_id;
}

inline std::uint64_t trial_seed(std::uint64_t study_seed, int trial_id) { return derive_seed(study_seed, static_cast<std::uint64_t>(trial_id)); }

namespace detail {

inline double median(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace detail

inline StudyRecord search(const SearchSpace& space, TrialRunner& runner, const SearchOptions& opt, const AccessAudit* audit = nullptr)
{
    space.validate();
    if (opt.budget <= 0) throw ConfigError("budget must be positive");
    if (opt.epoch_cap <= space.freeze_epochs) throw ConfigError("epoch_cap must exceed freeze_epochs");

    StudyRecord study;
    study.study_id = opt.study_id;
    study.seed = opt.seed;
    study.budget = opt.budget;
    study.epoch_cap = opt.epoch_cap;
    study.space = space;

    for (int id = 0; id < opt.budget; ++id) {
        TrialRecord rec;
        rec.trial_id = id;
        rec.seed = trial_seed(opt.seed, id);
        Rng sampler(derive_seed(rec.seed, 0x5A3B1E));
        rec.config = space.sample(sampler);

        TrialContext ctx{id, rec.seed, opt.epoch_cap, rec.config, {}};
        ctx.report = [&](int epoch, double mae) {
            rec.curve.push_back(mae);
            rec.epochs_run = epoch;
            if (mae < rec.val_mae_best) {
                rec.val_mae_best = mae;
                rec.best_epoch = epoch;
            }
            if (!opt.median_pruning || epoch <= opt.pruning_warmup_epochs) return;
            std::vector<double> peers;
            for (const auto& t : study.trials) {
                if (t.status != TrialStatus::Complete || static_cast<int>(t.curve.size()) < epoch) continue;
                peers.push_back(*std::min_element(t.curve.begin(), t.curve.begin() + epoch));
            }
            if (!peers.empty() && rec.val_mae_best > detail::median(peers))
                throw TrialPruned("pruned at epoch " + std::to_string(epoch));
        };
        try {
            const auto out = runner.run(ctx);
            if (out.epochs_run > opt.epoch_cap)
                throw ConfigError("trial ran " + std::to_string(out.epochs_run) + " epochs, cap is " + std::to_string(opt.epoch_cap));
            rec.val_mae_best = out.val_mae_best;
            rec.epochs_run = out.epochs_run;
            rec.best_epoch = out.best_epoch;
            rec.curve = out.curve;
            rec.status = std::isfinite(rec.val_mae_best) ? TrialStatus::Complete : TrialStatus::Failed;
            if (rec.status == TrialStatus::Failed) rec.error = "no finite validation MAE";
        } catch (const TrialPruned& e) {
            rec.status = TrialStatus::Pruned;
            rec.error = e.what();
        } catch (const std::exception& e) {
            rec.status = TrialStatus::Failed;
            rec.error = e.what();
        }
        study.trials.push_back(rec);
        if (opt.on_trial) opt.on_trial(study.trials.back());
    }

    const auto best = select_best(study.trials);
    if (!best) throw NumericalError("study " + opt.study_id + " finished with zero COMPLETE trials");
    study.best_trial_id = *best;
    study.best_config = study.best().config;
    study.best_val_mae = study.best().val_mae_best;
    study.test_reads_at_selection = audit ? audit->reads(Split::Test) : 0;

    if (opt.log_test_mae)
        for (auto& t : study.trials)
            if (t.status == TrialStatus::Complete) t.test_mae = runner.test_mae(t.trial_id);
    return study;
}

/// Runs each trial through the real training loop; the best checkpoint of
/// every trial is kept under `dir/trials/<id>/` so held-out numbers can be
/// produced after selection.
class TrainingTrialRunner final : public TrialRunner {
public:
    TrainingTrialRunner(ModelSpec model, TensorMap backbone, const SplitDataset& data, const ImageSource& images, TrainSpec base,
                        std::filesystem::path dir)
        : model_(std::move(model)), backbone_(std::move(backbone)), data_(data), images_(images), base_(std::move(base)), dir_(std::move(dir))
    {
    }

    TrialOutcome run(const TrialContext& ctx) override
    {
        ModelSpec ms = model_;
        ms.dropout = ctx.config.dropout;
        auto model = build(ms, backbone_, derive_seed(ctx.seed, 0x4EAD));
        TrainSpec ts = base_;
        ts.lr = ctx.config.lr;
        ts.batch_size = ctx.config.batch_size;
        ts.transform = ctx.config.transform;
        ts.epochs = ctx.epoch_cap;
        ts.seed = ctx.seed;
        RunOptions o;
        o.images = &images_;
        o.deterministic_val = false;
        o.on_epoch = [&](const EpochRecord& r, AgeModel&) { ctx.report(r.epoch, r.val_mae); };
        const auto res = mobileage::run(*model, data_, ts, o);
        if (!dir_.empty()) save_checkpoint(trial_dir(ctx.trial_id) / "best.ckpt", res.best);
        TrialOutcome out;
        out.val_mae_best = res.policy.best_value;
        out.best_epoch = res.policy.best_epoch;
        out.epochs_run = static_cast<int>(res.records.size());
        for (const auto& r : res.records) out.curve.push_back(r.val_mae);
        return out;
    }

    std::optional<double> test_mae(int trial_id) override
    {
        const auto path = trial_dir(trial_id) / "best.ckpt";
        if (dir_.empty() || !std::filesystem::exists(path)) return std::nullopt;
        auto model = model_from_checkpoint(load_checkpoint(path));
        ModelPredictor p(*model);
        return evaluate(p, data_, Split::Test, images_).mae;
    }

private:
    [[nodiscard]] std::filesystem::path trial_dir(int id) const
    {
        auto d = dir_ / "trials" / std::to_string(id);
        std::filesystem::create_directories(d);
        return d;
    }

    ModelSpec model_;
    TensorMap backbone_;
    const SplitDataset& data_;
    const ImageSource& images_;
    TrainSpec base_;
    std::filesystem::path dir_;
};

// ---------------------------------------------------------------------------
// Locked run

/// The final run's settings, frozen from the selected trial.
struct LockedConfig {
    std::string study_id;
    int source_trial_id = -1;
    ModelSpec model;
    TrainSpec train;
};

inline nlohmann::json locked_body(const LockedConfig& c)
{
    return {{"kind", "locked_config"}, {"study_id", c.study_id}, {"source_trial_id", c.source_trial_id}, {"model", c.model}, {"train", c.train}};
}

inline LockedConfig lock_config(const StudyRecord& study, const ModelSpec& model, const TrainSpec& base, int final_epochs = 100)
{
    const auto& best = study.best();
    if (best.status != TrialStatus::Complete) throw ConfigError("selected trial is not COMPLETE");
    LockedConfig c;
    c.study_id = study.study_id;
    c.source_trial_id = best.trial_id;
    c.model = model;
    c.model.dropout = best.config.dropout;
    c.train = base;
    c.train.lr = best.config.lr;
    c.train.batch_size = best.config.batch_size;
    c.train.transform = best.config.transform;
    c.train.epochs = final_epochs;
    c.train.freeze_epochs = study.space.freeze_epochs;
    c.train.backbone_lr_mult = study.space.backbone_lr_mult;
    c.model.validate();
    c.train.validate();
    return c;
}

/// The published final configuration.
inline LockedConfig paper_locked_config()
{
    LockedConfig c;
    c.study_id = "paper";
    c.source_trial_id = 34;
    c.model.dropout = 0.18074;
    c.train.lr = 0.0014162;
    c.train.batch_size = 64;
    c.train.epochs = 100;
    c.train.freeze_epochs = 5;
    c.train.backbone_lr_mult = 0.10;
    c.train.transform = transform_name(TransformKind::ResizeColorJitFlipBlur);
    return c;
}

inline void save_locked(const std::filesystem::path& path, const LockedConfig& c)
{
    auto j = locked_body(c);
    j["checksum"] = body_checksum(j);
    const auto text = j.dump(2) + "\n";
    write_file_atomic(path, text);
}

inline LockedConfig load_locked(const std::filesystem::path& path)
{
    const auto j = read_checked(path, "locked config", "hpo-finalize");
    LockedConfig c;
    c.study_id = j.at("study_id").get<std::string>();
    c.source_trial_id = j.at("source_trial_id").get<int>();
    c.model = j.at("model").get<ModelSpec>();
    c.train = j.at("train").get<TrainSpec>();
    c.model.validate();
    c.train.validate();
    return c;
}

struct FinalReport {
    std::string run_id;
    std::string study_id;
    std::string locked_checksum;
    int best_epoch = 0;
    double best_val_mae = 0.0;
    double test_mae = 0.0;
    std::size_t test_reads_before_selection = 0;
    bool test_evaluated_before_selection = false;
    std::size_t epochs = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FinalReport, run_id, study_id, locked_checksum, best_epoch, best_val_mae, test_mae,
                                   test_reads_before_selection, test_evaluated_before_selection, epochs)

/// Registry of locked runs per study, kept next to the study record.
inline std::vector<std::string> locked_runs(const std::filesystem::path& registry)
{
    if (!std::filesystem::exists(registry)) return {};
    std::ifstream in(registry);
    return nlohmann::json::parse(in).get<std::vector<std::string>>();
}

struct FinalizeOptions {
    std::string run_id = "final";
    bool force = false;
    std::filesystem::path registry; // empty: no second-run guard
    std::filesystem::path out_dir;  // checkpoints and logs of the locked run
};

/// Exactly one training run with the locked settings, followed by a single
/// held-out evaluation of the selected checkpoint.
inline FinalReport finalize(const LockedConfig& locked, const TensorMap& backbone, const SplitDataset& data, const ImageSource& images,
                            const FinalizeOptions& opt, AccessAudit& audit)
{
    auto runs = locked_runs(opt.registry);
    if (!opt.registry.empty() && !runs.empty()) {
        if (!opt.force)
            throw ConfigError("study " + locked.study_id + " already has a locked run (" + runs.front() +
                              "); pass --force with a new run id to run again");
        if (std::find(runs.begin(), runs.end(), opt.run_id) != runs.end())
            throw ConfigError("run id " + opt.run_id + " was already used for study " + locked.study_id);
    }

    const std::size_t test_before = audit.reads(Split::Test);
    auto model = build(locked.model, backbone, derive_seed(locked.train.seed, 0x4EAD));
    RunOptions ro;
    ro.images = &images;
    ro.out_dir = opt.out_dir;
    const auto res = run(*model, data, locked.train, ro);
    const std::size_t test_at_selection = audit.reads(Split::Test) - test_before;

    ModelPredictor p(*model);
    const auto test = evaluate(p, data, Split::Test, images);

    FinalReport r;
    r.run_id = opt.run_id;
    r.study_id = locked.study_id;
    r.locked_checksum = body_checksum(locked_body(locked));
    r.best_epoch = res.policy.best_epoch;
    r.best_val_mae = res.policy.best_value;
    r.test_mae = test.mae;
    r.test_reads_before_selection = test_at_selection;
    r.test_evaluated_before_selection = test_at_selection != 0;
    r.epochs = res.records.size();

    if (!opt.registry.empty()) {
        runs.push_back(opt.run_id);
        const auto text = nlohmann::json(runs).dump(2) + "\n";
        write_file_atomic(opt.registry, text);
    }
    return r;
}

} // namespace mobileage::hpo
