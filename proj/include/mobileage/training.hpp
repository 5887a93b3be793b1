#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/dataset.hpp"
#include "mobileage/evaluation.hpp"
#include "mobileage/model.hpp"
#include "mobileage/optim.hpp"
#include "mobileage/transforms.hpp"

namespace mobileage {

struct TrainSpec {
    double lr = 1e-3;
    int batch_size = 64;
    int epochs = 100;
    int freeze_epochs = 5;
    double backbone_lr_mult = 0.10;
    double clip_norm = 2.0;
    double loss_beta = 1.0;
    double weight_decay = 0.01;
    double lr_min_ratio = 0.01;
    std::uint64_t seed = 42;
    std::string transform{transform_name(TransformKind::ResizeColorJitFlipBlur)};

    void validate() const
    {
        if (!(lr > 0.0)) throw ConfigError("lr must be positive");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (freeze_epochs < 0) throw ConfigError("freeze_epochs must be >= 0");
        if (epochs < freeze_epochs) throw ConfigError("epochs must be >= freeze_epochs");
        if (epochs <= 0) throw ConfigError("epochs must be positive");
        if (!(backbone_lr_mult > 0.0)) throw ConfigError("backbone_lr_mult must be positive");
        if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
        if (!(loss_beta > 0.0)) throw ConfigError("loss_beta must be positive");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        if (!(lr_min_ratio >= 0.0 && lr_min_ratio <= 1.0)) throw ConfigError("lr_min_ratio must be in [0, 1]");
        (void)parse_transform(transform);
    }
    friend bool operator==(const TrainSpec&, const TrainSpec&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainSpec, lr, batch_size, epochs, freeze_epochs, backbone_lr_mult, clip_norm, loss_beta,
                                   weight_decay, lr_min_ratio, seed, transform)

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
    double value = 0.0;
    std::vector<double> grad; // d(mean loss)/d(pred)
};

/// Mean Smooth-L1 against targets clamped to [lo, hi]:
/// 0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta otherwise.
inline LossResult smooth_l1_loss(std::span<const double> pred, std::span<const double> target, double beta, double lo, double hi)
{
    if (pred.size() != target.size() || pred.empty()) throw ConfigError("loss needs equally sized, non-empty batches");
    LossResult r;
    r.grad.resize(pred.size());
    std::vector<double> per(pred.size());
    std::vector<std::size_t> bad;
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - std::clamp(target[i], lo, hi);
        const double ad = std::abs(d);
        per[i] = ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
        r.grad[i] = (ad < beta ? d / beta : (d > 0 ? 1.0 : -1.0)) * inv_n;
        if (!std::isfinite(per[i])) bad.push_back(i);
    }
    if (!bad.empty()) {
        std::ostringstream os;
        os << "non-finite loss at batch indices";
        for (auto i : bad) os << ' ' << i;
        throw NumericalError(os.str());
    }
    r.value = pairwise_sum(per) * inv_n;
    return r;
}

// ---------------------------------------------------------------------------
// Records

struct EpochRecord {
    int epoch = 0;
    std::string stage;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_mae = 0.0;
    double val_mae_deterministic = std::numeric_limits<double>::quiet_NaN();
    double lr_head = 0.0;
    double lr_backbone = 0.0;
    int param_groups = 0;
    double grad_norm = 0.0;
    double throughput = 0.0;

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r)
{
    j = {{"epoch", r.epoch},           {"stage", r.stage},         {"train_loss", r.train_loss},
         {"val_loss", r.val_loss},     {"val_mae", r.val_mae},     {"lr_head", r.lr_head},
         {"lr_backbone", r.lr_backbone}, {"param_groups", r.param_groups}, {"grad_norm", r.grad_norm},
         {"throughput", r.throughput}};
    j["val_mae_deterministic"] = std::isnan(r.val_mae_deterministic) ? nlohmann::json(nullptr) : nlohmann::json(r.val_mae_deterministic);
}

inline void from_json(const nlohmann::json& j, EpochRecord& r)
{
    r.epoch = j.at("epoch").get<int>();
    r.stage = j.at("stage").get<std::string>();
    r.train_loss = j.at("train_loss").get<double>();
    r.val_loss = j.at("val_loss").get<double>();
    r.val_mae = j.at("val_mae").get<double>();
    r.lr_head = j.at("lr_head").get<double>();
    r.lr_backbone = j.at("lr_backbone").get<double>();
    r.param_groups = j.at("param_groups").get<int>();
    r.grad_norm = j.at("grad_norm").get<double>();
    r.throughput = j.at("throughput").get<double>();
    const auto& d = j.at("val_mae_deterministic");
    r.val_mae_deterministic = d.is_null() ? std::numeric_limits<double>::quiet_NaN() : d.get<double>();
}

inline std::vector<EpochRecord> read_epoch_log(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("training log not found: " + path.string() + " (produce it with `mobileage train`)");
    std::vector<EpochRecord> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<EpochRecord>());
    return out;
}

/// Tracks the minimum validation MAE.
struct CheckpointPolicy {
    std::string monitor = "val_mae";
    std::string mode = "min";
    int best_epoch = 0;
    double best_value = std::numeric_limits<double>::infinity();

    /// True when `value` improves on the best so far.
    bool update(int epoch, double value)
    {
        if (value < best_value) {
            best_value = value;
            best_epoch = epoch;
            return true;
        }
        return false;
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CheckpointPolicy, monitor, mode, best_epoch, best_value)

// ---------------------------------------------------------------------------
// Run

struct RunOptions {
    const ImageSource* images = nullptr;
    std::filesystem::path out_dir;   // empty: keep everything in memory
    bool resume = false;
    bool restore_best = true;
    bool deterministic_val = true;    // also log MAE under eval_deterministic
    std::size_t eval_batch = 32;
    std::function<void(const EpochRecord&, AgeModel&)> on_epoch;
};

struct RunResult {
    Checkpoint best;
    std::vector<EpochRecord> records;
    CheckpointPolicy policy;
};

namespace detail {

inline constexpr std::uint64_t kTrainAugStream = 0x7A1;
inline constexpr std::uint64_t kValAugStream = 0x7A2;
inline constexpr std::uint64_t kDropoutStream = 0xD0;
inline constexpr std::uint64_t kShuffleStream = 0x5F;

inline std::vector<ParamGroup> stage_groups(AgeModel& m, Stage s, double lr, double mult)
{
    std::vector<ParamGroup> g{{"head", m.head_params(), lr}};
    if (s == Stage::Full) g.push_back({"backbone", m.backbone_params(), lr * mult});
    return g;
}

inline std::vector<nn::NamedParam> trainable(AgeModel& m)
{
    std::vector<nn::NamedParam> out = m.head_params();
    if (m.stage() == Stage::Full) out.insert(out.end(), m.backbone_params().begin(), m.backbone_params().end());
    return out;
}

} // namespace detail

/// Validation MAE and loss at `epoch` using the training transform, with the
/// same per-sample rng streams every time it is replayed.
inline std::pair<double, double> validate_epoch(AgeModel& model, const std::vector<Sample>& val, const ImageSource& images,
                                                const TrainSpec& spec, int epoch, std::size_t batch)
{
    ModelPredictor pred(model);
    EvalOptions opt{make_transform(spec.transform), batch, derive_seed(spec.seed, detail::kValAugStream, static_cast<std::uint64_t>(epoch))};
    const auto report = evaluate(pred, val, images, "val", opt);
    std::vector<double> p, t;
    for (const auto& x : report.predictions) {
        p.push_back(x.pred);
        t.push_back(x.target);
    }
    const auto loss = smooth_l1_loss(p, t, spec.loss_beta, model.spec().train_min, model.spec().train_max).value;
    return {report.mae, loss};
}

/// Two-stage fine-tuning: `freeze_epochs` head-only epochs with inference-
/// mode backbone normalization, then joint training with the backbone at a
/// reduced learning rate. Each stage has its own per-step cosine schedule
/// down to lr * lr_min_ratio. Validation after every epoch drives best-
/// checkpoint selection; the TEST split is never read.
inline RunResult run(AgeModel& model, const SplitDataset& data, const TrainSpec& spec, const RunOptions& opt)
{
    spec.validate();
    if (!opt.images) throw ConfigError("training needs an image source");
    const auto train = data.split(Split::Train);
    const auto val = data.split(Split::Val);
    if (train.empty()) throw DataError("training split is empty");
    if (val.empty()) throw DataError("validation split is empty");

    const TransformSpec tf = make_transform(spec.transform);
    const auto steps_per_epoch = static_cast<std::int64_t>((train.size() + spec.batch_size - 1) / spec.batch_size);
    const std::int64_t frozen_steps = steps_per_epoch * spec.freeze_epochs;
    const std::int64_t full_steps = steps_per_epoch * (spec.epochs - spec.freeze_epochs);

    RunResult result;
    int start_epoch = 1;
    std::optional<AdamW> optimizer;
    Stage current = spec.freeze_epochs > 0 ? Stage::FrozenBackbone : Stage::Full;

    const auto ck_dir = opt.out_dir.empty() ? std::filesystem::path{} : opt.out_dir / "checkpoints";
    const auto log_path = opt.out_dir.empty() ? std::filesystem::path{} : opt.out_dir / "logs" / "epochs.jsonl";
    const auto last_path = ck_dir / "last.ckpt";

    if (opt.resume && !ck_dir.empty() && std::filesystem::exists(last_path)) {
        auto last = load_checkpoint(last_path);
        model.load_state_dict(last.state);
        for (const auto& r : last.extra.at("records")) result.records.push_back(r.get<EpochRecord>());
        result.policy = last.extra.at("policy").get<CheckpointPolicy>();
        start_epoch = last.epoch + 1;
        current = start_epoch <= spec.freeze_epochs ? Stage::FrozenBackbone : Stage::Full;
        model.set_stage(current);
        optimizer.emplace(detail::stage_groups(model, current, spec.lr, spec.backbone_lr_mult), AdamWConfig{.weight_decay = spec.weight_decay});
        if (last.epoch != spec.freeze_epochs) optimizer->load_state(last.auxiliary, last.extra.at("optimizer_steps").get<std::int64_t>());
        if (std::filesystem::exists(ck_dir / "best.ckpt")) result.best = load_checkpoint(ck_dir / "best.ckpt");
    }
    if (!ck_dir.empty()) std::filesystem::create_directories(ck_dir);
    if (!log_path.empty()) {
        std::filesystem::create_directories(log_path.parent_path());
        std::ofstream log(log_path, std::ios::trunc);
        for (const auto& r : result.records) log << nlohmann::json(r).dump() << '\n';
    }

    for (int epoch = start_epoch; epoch <= spec.epochs; ++epoch) {
        const Stage stage = epoch <= spec.freeze_epochs ? Stage::FrozenBackbone : Stage::Full;
        if (!optimizer || stage != current) {
            current = stage;
            model.set_stage(stage);
            optimizer.emplace(detail::stage_groups(model, stage, spec.lr, spec.backbone_lr_mult), AdamWConfig{.weight_decay = spec.weight_decay});
        }
        model.set_stage(stage);
        const std::int64_t stage_total = stage == Stage::FrozenBackbone ? frozen_steps : full_steps;
        const int stage_first_epoch = stage == Stage::FrozenBackbone ? 1 : spec.freeze_epochs + 1;

        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(derive_seed(spec.seed, detail::kShuffleStream, static_cast<std::uint64_t>(epoch)));
        shuffle.shuffle(std::span<std::size_t>(order));

        EpochRecord rec;
        rec.epoch = epoch;
        rec.stage = stage == Stage::FrozenBackbone ? "frozen_backbone" : "full";
        rec.param_groups = static_cast<int>(optimizer->groups().size());
        double loss_sum = 0.0, norm_sum = 0.0;
        const auto t0 = std::chrono::steady_clock::now();
        model.set_mode(Mode::Train);
        for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
            const std::int64_t t = (epoch - stage_first_epoch) * steps_per_epoch + step;
            for (auto& g : optimizer->groups()) {
                const double base = g.name == "head" ? spec.lr : spec.lr * spec.backbone_lr_mult;
                g.lr = cosine_lr(t, stage_total, base, base * spec.lr_min_ratio);
            }
            if (step == 0) {
                rec.lr_head = optimizer->groups()[0].lr;
                rec.lr_backbone = optimizer->groups().size() > 1 ? optimizer->groups()[1].lr : 0.0;
            }
            const std::size_t lo = static_cast<std::size_t>(step) * spec.batch_size;
            const std::size_t hi = std::min(train.size(), lo + spec.batch_size);
            std::vector<Tensor> inputs;
            std::vector<double> targets;
            for (std::size_t k = lo; k < hi; ++k) {
                const auto& s = train[order[k]];
                Rng rng = sample_rng(derive_seed(spec.seed, detail::kTrainAugStream, static_cast<std::uint64_t>(epoch)), 0, order[k]);
                inputs.push_back(apply(tf, opt.images->load(s), rng));
                targets.push_back(s.age);
            }
            Rng drop(derive_seed(spec.seed, detail::kDropoutStream, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(step)));
            const auto pred = model.forward(stack(inputs), &drop);
            const auto loss = smooth_l1_loss(pred, targets, spec.loss_beta, model.spec().train_min, model.spec().train_max);
            model.zero_grad();
            model.backward(loss.grad);
            norm_sum += clip_gradients(detail::trainable(model), spec.clip_norm);
            optimizer->step();
            loss_sum += loss.value;
        }
        model.set_mode(Mode::Eval);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rec.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
        rec.grad_norm = norm_sum / static_cast<double>(steps_per_epoch);
        rec.throughput = secs > 0 ? static_cast<double>(train.size()) / secs : 0.0;

        std::tie(rec.val_mae, rec.val_loss) = validate_epoch(model, val, *opt.images, spec, epoch, opt.eval_batch);
        if (std::isnan(rec.val_mae))
            throw NumericalError("validation MAE is NaN at epoch " + std::to_string(epoch) + "; last good checkpoint preserved");
        if (opt.deterministic_val) {
            ModelPredictor p(model);
            rec.val_mae_deterministic = evaluate(p, val, *opt.images, "val", {make_transform(TransformKind::EvalDeterministic), opt.eval_batch, 0}).mae;
        }

        result.records.push_back(rec);
        if (result.policy.update(epoch, rec.val_mae)) {
            result.best = make_checkpoint(model, epoch, {{"val_mae", rec.val_mae}, {"train_spec", spec}});
            if (!ck_dir.empty()) {
                for (const auto& e : std::filesystem::directory_iterator(ck_dir))
                    if (e.path().filename().string().ends_with("_best.ckpt")) std::filesystem::remove(e.path());
                save_checkpoint(ck_dir / "best.ckpt", result.best);
                char name[32];
                std::snprintf(name, sizeof(name), "epoch_%03d_best.ckpt", epoch);
                std::filesystem::copy_file(ck_dir / "best.ckpt", ck_dir / name, std::filesystem::copy_options::overwrite_existing);
            }
        }
        if (!log_path.empty()) {
            std::ofstream log(log_path, std::ios::app);
            log << nlohmann::json(rec).dump() << '\n';
        }
        if (!ck_dir.empty()) {
            nlohmann::json recs = result.records;
            Checkpoint last = make_checkpoint(model, epoch, {{"records", recs}, {"policy", result.policy}, {"optimizer_steps", optimizer->steps()}});
            last.auxiliary = optimizer->state();
            save_checkpoint(last_path, last);
        }
        if (opt.on_epoch) opt.on_epoch(rec, model);
    }

    if (opt.restore_best && result.policy.best_epoch > 0) model.load_state_dict(result.best.state);
    model.set_mode(Mode::Eval);
    return result;
}

} // namespace mobileage
