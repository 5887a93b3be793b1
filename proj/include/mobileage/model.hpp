#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/backbone.hpp"
#include "mobileage/error.hpp"
#include "mobileage/nn/graph.hpp"
#include "mobileage/nn/layers.hpp"
#include "mobileage/rng.hpp"
#include "mobileage/tensor.hpp"
#include "mobileage/tensor_io.hpp"

namespace mobileage {

struct ModelSpec {
    std::string backbone{kMobileNetV3Large};
    std::vector<int> head_dims{960, 256, 64, 1};
    double dropout = 0.2;
    double age_min_total = 0.0;
    double age_max_total = 116.0;
    double train_min = 1.0;
    double train_max = 95.0;
    int input_size = 224;
    double init_std = 0.02;
    double init_truncation = 2.0; // in standard deviations

    void validate() const
    {
        validate_backbone_name(backbone);
        if (head_dims != std::vector<int>{960, 256, 64, 1}) throw ConfigError("head_dims must be (960, 256, 64, 1)");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
        if (!(age_min_total < age_max_total)) throw ConfigError("age_min_total must be below age_max_total");
        if (!(age_min_total <= train_min && train_min < train_max && train_max <= age_max_total))
            throw ConfigError("training range must satisfy age_min_total <= train_min < train_max <= age_max_total");
        if (backbone == kTinyBackbone) {
            // test-sized stand-in; any multiple of the total stride
            if (input_size < 32 || input_size % 32 != 0) throw ConfigError("tiny backbone input_size must be a positive multiple of 32");
        } else if (input_size != 224) {
            throw ConfigError("input_size must be 224");
        }
        if (!(init_std > 0.0 && init_truncation > 0.0)) throw ConfigError("head init parameters must be positive");
    }
    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelSpec, backbone, head_dims, dropout, age_min_total, age_max_total, train_min,
                                   train_max, input_size, init_std, init_truncation)

enum class Stage { FrozenBackbone, Full };
enum class Mode { Train, Eval };

/// Logistic function without overflow for large |z|.
inline double stable_sigmoid(double z)
{
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// lo + (hi - lo) * sigmoid(z), kept strictly inside (lo, hi) at the
/// representable level even where the logistic saturates.
inline double bounded_age(double z, double lo, double hi)
{
    const double a = lo + (hi - lo) * stable_sigmoid(z);
    return std::clamp(a, std::nextafter(lo, hi), std::nextafter(hi, lo));
}

/// d bounded_age / dz.
inline double bounded_age_grad(double z, double lo, double hi)
{
    const double s = stable_sigmoid(z);
    return (hi - lo) * s * (1.0 - s);
}

struct ModelCounts {
    std::int64_t params = 0;
    std::int64_t mult_adds = 0;
    std::string convention = "one multiply-accumulate per fused multiply-add over convolution and linear layers";
};

/// Backbone, global pooling, regression head and bounded output mapping.
class AgeModel {
public:
    explicit AgeModel(ModelSpec spec) : spec_(std::move(spec))
    {
        spec_.validate();
        backbone_ = make_backbone(spec_.backbone);
        head_.add<nn::Linear>(spec_.head_dims[0], spec_.head_dims[1]);
        head_.add<nn::Activation>(nn::Act::Hardswish);
        head_.add<nn::Dropout>(spec_.dropout);
        head_.add<nn::Linear>(spec_.head_dims[1], spec_.head_dims[2]);
        head_.add<nn::Activation>(nn::Act::Hardswish);
        head_.add<nn::Dropout>(spec_.dropout);
        head_.add<nn::Linear>(spec_.head_dims[2], spec_.head_dims[3]);
        backbone_->collect("backbone", backbone_state_);
        head_.collect("head", head_state_);
    }

    AgeModel(const AgeModel&) = delete;
    AgeModel& operator=(const AgeModel&) = delete;

    [[nodiscard]] const ModelSpec& spec() const noexcept { return spec_; }
    [[nodiscard]] Stage stage() const noexcept { return stage_; }
    [[nodiscard]] Mode mode() const noexcept { return mode_; }
    void set_stage(Stage s) noexcept { stage_ = s; }
    void set_mode(Mode m) noexcept { mode_ = m; }

    /// Dropout probabilities of the two hidden-layer dropout sites.
    [[nodiscard]] std::vector<double> dropout_rates()
    {
        return {static_cast<nn::Dropout&>(head_.at(2)).p(), static_cast<nn::Dropout&>(head_.at(5)).p()};
    }
    void set_dropout(double p)
    {
        static_cast<nn::Dropout&>(head_.at(2)).set_p(p);
        static_cast<nn::Dropout&>(head_.at(5)).set_p(p);
        spec_.dropout = p;
    }

    /// Truncated-normal head weights, zero biases.
    void init_head(std::uint64_t seed)
    {
        Rng rng(derive_seed(seed, 0x4EAD));
        for (auto& np : head_state_.params) {
            auto& v = np.param->value;
            if (np.name.ends_with(".bias")) {
                v.zero();
                continue;
            }
            for (auto& x : v.values()) x = static_cast<float>(spec_.init_std * rng.truncated_normal(spec_.init_truncation));
        }
    }

    /// Ages for a normalized (N, 3, 224, 224) batch. In TRAIN mode the pass
    /// is retained for backward(); `rng` drives dropout.
    std::vector<double> forward(const Tensor& batch, Rng* rng = nullptr)
    {
        if (batch.rank() != 4 || batch.dim(1) != 3)
            throw ConfigError("model input must be (N, 3, H, W), got " + shape_str(batch.shape()));
        const bool train = mode_ == Mode::Train;
        const bool full = stage_ == Stage::Full;
        nn::ForwardCtx bctx{train, train && full, train && full, rng};
        nn::ForwardCtx hctx{train, false, train, rng};
        Tensor feats = backbone_->forward(batch, bctx);
        Tensor pooled = pool_.forward(feats, {false, false, train && full, nullptr});
        Tensor z = head_.forward(pooled, hctx);
        last_z_.assign(z.values().begin(), z.values().end());
        std::vector<double> ages(last_z_.size());
        for (std::size_t i = 0; i < ages.size(); ++i) {
            if (!std::isfinite(last_z_[i])) throw NumericalError("non-finite activation at batch index " + std::to_string(i));
            ages[i] = bounded_age(last_z_[i], spec_.age_min_total, spec_.age_max_total);
        }
        retained_ = train;
        return ages;
    }

    /// Pooled (N, 960) backbone features with running statistics; leaves no
    /// state for backward().
    Tensor features(const Tensor& batch)
    {
        if (batch.rank() != 4 || batch.dim(1) != 3)
            throw ConfigError("model input must be (N, 3, H, W), got " + shape_str(batch.shape()));
        retained_ = false;
        return pool_.forward(backbone_->forward(batch, {false, false, false, nullptr}), {false, false, false, nullptr});
    }

    /// Back-propagate d(loss)/d(age) from the last TRAIN forward. Backbone
    /// gradients are produced only in the FULL stage.
    void backward(std::span<const double> dloss_dage)
    {
        if (!retained_) throw Error("backward() needs a preceding TRAIN-mode forward()");
        if (dloss_dage.size() != last_z_.size()) throw ConfigError("gradient size does not match the last batch");
        Tensor dz({static_cast<std::int64_t>(last_z_.size()), 1});
        for (std::size_t i = 0; i < last_z_.size(); ++i)
            dz[i] = static_cast<float>(dloss_dage[i] * bounded_age_grad(last_z_[i], spec_.age_min_total, spec_.age_max_total));
        const bool full = stage_ == Stage::Full;
        Tensor dpooled = head_.backward(dz, full);
        if (full) backbone_->backward(pool_.backward(dpooled, true), false);
        release();
    }

    void release()
    {
        backbone_->release();
        head_.release();
        retained_ = false;
    }

    void zero_grad()
    {
        for (auto* st : {&backbone_state_, &head_state_})
            for (auto& p : st->params) p.param->grad.zero();
    }

    [[nodiscard]] const std::vector<nn::NamedParam>& backbone_params() const noexcept { return backbone_state_.params; }
    [[nodiscard]] const std::vector<nn::NamedParam>& head_params() const noexcept { return head_state_.params; }
    [[nodiscard]] const std::vector<nn::NamedBuffer>& backbone_buffers() const noexcept { return backbone_state_.buffers; }
    [[nodiscard]] const std::vector<nn::BatchNorm2d*>& backbone_norms() const noexcept { return backbone_state_.norms; }

    /// Every parameter and buffer by name.
    [[nodiscard]] TensorMap state_dict() const
    {
        TensorMap m;
        for (const auto* st : {&backbone_state_, &head_state_}) {
            for (const auto& p : st->params) m.emplace(p.name, p.param->value);
            for (const auto& b : st->buffers) m.emplace(b.name, *b.tensor);
        }
        return m;
    }

    /// Backbone parameters and buffers only, i.e. the pretrained asset layout.
    [[nodiscard]] TensorMap backbone_state() const
    {
        TensorMap m;
        for (const auto& p : backbone_state_.params) m.emplace(p.name, p.param->value);
        for (const auto& b : backbone_state_.buffers) m.emplace(b.name, *b.tensor);
        return m;
    }

    void load_state_dict(const TensorMap& state) { load_into(state, true, true); }

    /// Load backbone tensors; head untouched. Any missing or mis-shaped
    /// tensor is reported with expected and found shapes.
    void load_backbone(const TensorMap& state) { load_into(state, true, false); }

    [[nodiscard]] ModelCounts count_params_and_flops() const
    {
        ModelCounts c;
        for (const auto* st : {&backbone_state_, &head_state_})
            for (const auto& p : st->params) c.params += static_cast<std::int64_t>(p.param->value.size());
        Shape s{1, 3, spec_.input_size, spec_.input_size};
        s = backbone_->infer(s, c.mult_adds);
        s = pool_.infer(s, c.mult_adds);
        (void)head_.infer(s, c.mult_adds);
        return c;
    }

    [[nodiscard]] ModelCounts count_head() const
    {
        ModelCounts c;
        for (const auto& p : head_state_.params) c.params += static_cast<std::int64_t>(p.param->value.size());
        (void)head_.infer({1, spec_.head_dims[0]}, c.mult_adds);
        return c;
    }

    /// Inference graph of the EVAL-mode model (dropout removed).
    [[nodiscard]] Graph export_graph() const
    {
        Graph g;
        g.input_shape = {-1, 3, spec_.input_size, spec_.input_size};
        GraphBuilder b(g);
        auto v = backbone_->emit(b, "backbone", g.input);
        v = pool_.emit(b, "pool", v);
        v = head_.emit(b, "head", v);
        g.output = b.add("BoundedSigmoid", {v}, {}, {{"min", spec_.age_min_total}, {"max", spec_.age_max_total}});
        return g;
    }

private:
    void load_into(const TensorMap& state, bool backbone, bool head)
    {
        std::ostringstream problems;
        auto check = [&](const std::string& name, Tensor& dst) {
            const auto it = state.find(name);
            if (it == state.end()) {
                problems << "\n  missing " << name << " expected " << shape_str(dst.shape());
            } else if (it->second.shape() != dst.shape()) {
                problems << "\n  " << name << " expected " << shape_str(dst.shape()) << " found " << shape_str(it->second.shape());
            }
        };
        std::vector<std::pair<std::string, Tensor*>> targets;
        auto gather = [&](nn::StateVisitor& st) {
            for (auto& p : st.params) targets.emplace_back(p.name, &p.param->value);
            for (auto& b : st.buffers) targets.emplace_back(b.name, b.tensor);
        };
        if (backbone) gather(backbone_state_);
        if (head) gather(head_state_);
        for (auto& [name, t] : targets) check(name, *t);
        if (!problems.str().empty()) throw DataError("weights do not match the " + spec_.backbone + " layout:" + problems.str());
        for (auto& [name, t] : targets) *t = state.at(name);
    }

    ModelSpec spec_;
    std::unique_ptr<nn::Sequential> backbone_;
    nn::GlobalAvgPool pool_;
    nn::Sequential head_;
    nn::StateVisitor backbone_state_;
    nn::StateVisitor head_state_;
    Stage stage_ = Stage::FrozenBackbone;
    Mode mode_ = Mode::Eval;
    std::vector<float> last_z_;
    bool retained_ = false;
};

/// Construct a model from the pretrained backbone tensors and a fresh head.
inline std::unique_ptr<AgeModel> build(const ModelSpec& spec, const TensorMap& pretrained_backbone, std::uint64_t head_seed)
{
    auto model = std::make_unique<AgeModel>(spec);
    model->load_backbone(pretrained_backbone);
    model->init_head(head_seed);
    return model;
}

inline std::unique_ptr<AgeModel> build(const ModelSpec& spec, const std::filesystem::path& pretrained_asset, std::uint64_t head_seed)
{
    if (!std::filesystem::exists(pretrained_asset))
        throw DataError("pretrained backbone asset not found: " + pretrained_asset.string() +
                        " (produce one with `mobileage init-backbone` or tools/convert_torchvision_backbone.py)");
    const auto archive = load_archive(pretrained_asset);
    const auto arch = archive.metadata.value("backbone", spec.backbone);
    if (arch != spec.backbone)
        throw DataError("pretrained asset is for backbone '" + arch + "' but the model expects '" + spec.backbone + "'");
    return build(spec, archive.tensors, head_seed);
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
    ModelSpec spec;
    int epoch = 0;
    nlohmann::json extra = nlohmann::json::object();
    TensorMap state;     // model parameters and buffers
    TensorMap auxiliary; // optimizer moments and the like
};

inline TensorArchive checkpoint_archive(const Checkpoint& ck)
{
    TensorArchive a;
    a.metadata = {{"kind", "checkpoint"}, {"spec", ck.spec}, {"epoch", ck.epoch}, {"extra", ck.extra}};
    a.tensors = ck.state;
    for (const auto& [k, v] : ck.auxiliary) a.tensors.emplace("aux/" + k, v);
    return a;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) { save_archive(path, checkpoint_archive(ck)); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path))
        throw DataError("checkpoint not found: " + path.string() + " (produce it with `mobileage train` or `mobileage hpo-finalize`)");
    auto a = load_archive(path);
    if (a.metadata.value("kind", "") != "checkpoint") throw DataError("not a model checkpoint: " + path.string());
    Checkpoint ck;
    ck.spec = a.metadata.at("spec").get<ModelSpec>();
    ck.epoch = a.metadata.at("epoch").get<int>();
    ck.extra = a.metadata.value("extra", nlohmann::json::object());
    for (auto& [k, v] : a.tensors) {
        if (k.starts_with("aux/")) ck.auxiliary.emplace(k.substr(4), std::move(v));
        else ck.state.emplace(k, std::move(v));
    }
    return ck;
}

inline Checkpoint make_checkpoint(const AgeModel& m, int epoch, nlohmann::json extra = nlohmann::json::object())
{
    return {m.spec(), epoch, std::move(extra), m.state_dict(), {}};
}

inline std::unique_ptr<AgeModel> model_from_checkpoint(const Checkpoint& ck)
{
    auto m = std::make_unique<AgeModel>(ck.spec);
    m->load_state_dict(ck.state);
    m->set_mode(Mode::Eval);
    return m;
}

} // namespace mobileage
