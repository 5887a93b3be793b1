#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/checksum.hpp"
#include "mobileage/evaluation.hpp"
#include "mobileage/export/flatbuf.hpp"
#include "mobileage/export/onnx.hpp"
#include "mobileage/model.hpp"
#include "mobileage/training.hpp"

namespace mobileage {

enum class ArtifactStage { SourceCheckpoint, PortableGraph, DeploymentGraph };

NLOHMANN_JSON_SERIALIZE_ENUM(ArtifactStage, {{ArtifactStage::SourceCheckpoint, "SOURCE_CHECKPOINT"},
                                             {ArtifactStage::PortableGraph, "PORTABLE_GRAPH"},
                                             {ArtifactStage::DeploymentGraph, "DEPLOYMENT_GRAPH"}})

struct ExportedArtifact {
    ArtifactStage stage = ArtifactStage::SourceCheckpoint;
    std::string file_ref;
    Shape input_signature;
    std::uint64_t size_bytes = 0;
    std::string sha256;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ExportedArtifact, stage, file_ref, input_signature, size_bytes, sha256)

inline constexpr const char* kPortableFile = "model.onnx";
inline constexpr const char* kDeploymentFile = "model.mafb";

inline ExportedArtifact describe_artifact(ArtifactStage stage, const std::filesystem::path& p, Shape sig)
{
    if (!std::filesystem::exists(p)) throw DataError("artifact not found: " + p.string());
    return {stage, p.string(), std::move(sig), static_cast<std::uint64_t>(std::filesystem::file_size(p)), sha256_file(p)};
}

/// Checkpoint -> portable graph -> deployment model, all float32. Output
/// bytes depend only on the weights (no timestamps are embedded).
inline std::vector<ExportedArtifact> export_chain(const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir)
{
    const auto ck = load_checkpoint(checkpoint);
    const auto model = model_from_checkpoint(ck);
    std::filesystem::create_directories(out_dir);
    const auto source_sha = sha256_file(checkpoint);

    const auto graph = model->export_graph();
    const auto portable = onnx::from_graph(graph, {{"source_sha256", source_sha}, {"backbone", model->spec().backbone}});
    const auto onnx_bytes = onnx::serialize(portable);
    write_file_atomic(out_dir / kPortableFile, onnx_bytes);

    // The deployment model is converted from the serialized portable graph,
    // not from the in-memory model.
    const auto reparsed = onnx::parse(onnx_bytes);
    const nlohmann::json meta{{"source_sha256", source_sha}, {"portable_sha256", sha256_hex(onnx_bytes)}};
    write_file_atomic(out_dir / kDeploymentFile, flat::serialize(flat::convert(reparsed, meta.dump())));

    const auto n = model->spec().input_size;
    std::vector<ExportedArtifact> chain{
        describe_artifact(ArtifactStage::SourceCheckpoint, checkpoint, {1, 3, n, n}),
        describe_artifact(ArtifactStage::PortableGraph, out_dir / kPortableFile, {-1, 3, n, n}),
        describe_artifact(ArtifactStage::DeploymentGraph, out_dir / kDeploymentFile, {1, 3, n, n}),
    };
    const auto text = nlohmann::json{{"artifacts", chain}}.dump(2) + "\n";
    write_file_atomic(out_dir / "export.json", text);
    return chain;
}

// ---------------------------------------------------------------------------
// Backends

/// Tensor in, one scalar per sample out.
class Backend {
public:
    virtual ~Backend() = default;
    [[nodiscard]] virtual std::string name() const = 0;
    /// [N,3,H,W] -> [N,1]
    virtual Tensor infer(const Tensor& x) = 0;
};

class CheckpointBackend final : public Backend {
public:
    explicit CheckpointBackend(AgeModel& m) : m_(m) {}
    [[nodiscard]] std::string name() const override { return "source_checkpoint"; }
    Tensor infer(const Tensor& x) override
    {
        m_.set_mode(Mode::Eval);
        const auto y = m_.forward(x, nullptr);
        Tensor out({static_cast<std::int64_t>(y.size()), 1});
        for (std::size_t i = 0; i < y.size(); ++i) out[i] = static_cast<float>(y[i]);
        return out;
    }

private:
    AgeModel& m_;
};

class PortableBackend final : public Backend {
public:
    explicit PortableBackend(const std::filesystem::path& p) : rt_(onnx::parse(read_bytes(p))) {}
    explicit PortableBackend(onnx::Model m) : rt_(std::move(m)) {}
    [[nodiscard]] std::string name() const override { return "portable_graph"; }
    Tensor infer(const Tensor& x) override { return rt_.run(x); }

    static std::string read_bytes(const std::filesystem::path& p)
    {
        if (!std::filesystem::exists(p)) throw DataError("portable graph not found: " + p.string() + " (produce it with `mobileage export`)");
        return read_file_bytes(p);
    }

private:
    onnx::Interpreter rt_;
};

/// Runs one sample at a time at the fixed 1x3xHxW signature.
class DeploymentBackend final : public Backend {
public:
    explicit DeploymentBackend(const std::filesystem::path& p) : rt_(flat::parse(PortableBackend::read_bytes(p))) {}
    explicit DeploymentBackend(flat::Model m) : rt_(std::move(m)) {}
    [[nodiscard]] std::string name() const override { return "deployment_graph"; }
    Tensor infer(const Tensor& x) override
    {
        Tensor out({x.dim(0), 1});
        for (std::int64_t i = 0; i < x.dim(0); ++i) {
            const auto sl = x.slice(i);
            const auto y = rt_.run(Tensor({1, x.dim(1), x.dim(2), x.dim(3)}, std::vector<float>(sl.begin(), sl.end())));
            out[static_cast<std::size_t>(i)] = y[0];
        }
        return out;
    }

private:
    flat::Runtime rt_;
};

// ---------------------------------------------------------------------------
// Preprocessing cache

inline std::string tensor_sha256(std::span<const float> v)
{
    return sha256_hex(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float)));
}

/// Deterministically preprocessed tensors for a fixed sample list, computed
/// once at construction and read-only afterwards.
class PreprocessCache {
public:
    PreprocessCache(std::span<const Sample> samples, const ImageSource& images)
    {
        for (const auto& s : samples) {
            tensors_.push_back(apply_eval(images.load(s)));
            hashes_.push_back(tensor_sha256(tensors_.back().values()));
        }
    }
    [[nodiscard]] std::size_t size() const noexcept { return tensors_.size(); }
    [[nodiscard]] const Tensor& tensor(std::size_t i) const { return tensors_.at(i); }
    [[nodiscard]] const std::string& hash(std::size_t i) const { return hashes_.at(i); }

    /// Batch [lo, hi) stacked; its bytes are the concatenation of the cached tensors.
    [[nodiscard]] Tensor batch(std::size_t lo, std::size_t hi) const
    {
        return stack(std::span<const Tensor>(tensors_).subspan(lo, hi - lo));
    }

private:
    std::vector<Tensor> tensors_;
    std::vector<std::string> hashes_;
};

// ---------------------------------------------------------------------------
// Report

struct ParitySample {
    std::string id;
    double target = 0.0;
    double out_a = 0.0;
    double out_b = 0.0;
    std::string input_sha256;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ParitySample, id, target, out_a, out_b, input_sha256)

struct ConsistencyReport {
    std::string split;
    std::string backend_a;
    std::string backend_b;
    std::size_t n = 0;
    double mae_stage_a = 0.0;
    double mae_stage_b = 0.0;
    double delta_conv = 0.0;
    std::optional<double> best_train_val_mae;
    std::optional<double> delta_val;
    double max_abs_output_gap = 0.0;
    double mean_abs_output_gap = 0.0;
    double flag_threshold = 1.0;
    std::vector<ParitySample> flagged;
    std::vector<ParitySample> samples;
};

inline nlohmann::json to_json_summary(const ConsistencyReport& r)
{
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"split", r.split},
            {"backend_a", r.backend_a},
            {"backend_b", r.backend_b},
            {"n", r.n},
            {"mae_stage_a", r.mae_stage_a},
            {"mae_stage_b", r.mae_stage_b},
            {"delta_conv", r.delta_conv},
            {"best_train_val_mae", opt(r.best_train_val_mae)},
            {"delta_val", opt(r.delta_val)},
            {"max_abs_output_gap", r.max_abs_output_gap},
            {"mean_abs_output_gap", r.mean_abs_output_gap},
            {"flag_threshold", r.flag_threshold},
            {"flagged", r.flagged}};
}

/// Lowest validation MAE recorded in a training log.
inline double best_val_mae_from_log(const std::vector<EpochRecord>& records)
{
    if (records.empty()) throw DataError("training log has no epoch records");
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : records) best = std::min(best, r.val_mae);
    return best;
}

struct ParityOptions {
    std::string split = "val";
    std::size_t max_samples = 0; // 0: the whole split
    std::uint64_t subset_seed = 0;
    std::size_t chunk = 32;
    double flag_threshold = 1.0;
    std::optional<double> best_train_val_mae;
};

/// Both backends see the same cached tensors in canonical (id) order.
inline ConsistencyReport run_parity(Backend& a, Backend& b, std::vector<Sample> samples, const ImageSource& images, const ParityOptions& opt = {})
{
    if (samples.empty()) throw DataError("parity needs at least one sample");
    std::sort(samples.begin(), samples.end(), [](const Sample& x, const Sample& y) { return x.id < y.id; });
    if (opt.max_samples > 0 && opt.max_samples < samples.size()) {
        Rng rng(derive_seed(opt.subset_seed, 0x9A817));
        rng.shuffle(std::span<Sample>(samples));
        samples.resize(opt.max_samples);
        std::sort(samples.begin(), samples.end(), [](const Sample& x, const Sample& y) { return x.id < y.id; });
    }

    ConsistencyReport r;
    r.split = opt.split;
    r.backend_a = a.name();
    r.backend_b = b.name();
    r.flag_threshold = opt.flag_threshold;
    const std::size_t chunk = std::max<std::size_t>(1, opt.chunk);
    for (std::size_t lo = 0; lo < samples.size(); lo += chunk) {
        const std::size_t hi = std::min(samples.size(), lo + chunk);
        const PreprocessCache cache(std::span<const Sample>(samples).subspan(lo, hi - lo), images);
        const Tensor x = cache.batch(0, cache.size());
        const Tensor ya = a.infer(x);
        const Tensor yb = b.infer(x);
        const Shape want{static_cast<std::int64_t>(cache.size()), 1};
        if (ya.shape() != want) throw DataError(a.name() + " returned " + shape_str(ya.shape()) + ", expected " + shape_str(want));
        if (yb.shape() != want) throw DataError(b.name() + " returned " + shape_str(yb.shape()) + ", expected " + shape_str(want));
        for (std::size_t i = 0; i < cache.size(); ++i) {
            if (tensor_sha256(x.slice(static_cast<std::int64_t>(i))) != cache.hash(i)) throw NumericalError("preprocessed tensor changed between backends");
            const auto& s = samples[lo + i];
            r.samples.push_back({s.id, s.age, ya[i], yb[i], cache.hash(i)});
        }
    }

    std::vector<double> pa, pb, t, gap;
    for (const auto& s : r.samples) {
        pa.push_back(s.out_a);
        pb.push_back(s.out_b);
        t.push_back(s.target);
        gap.push_back(std::abs(s.out_a - s.out_b));
        if (!std::isfinite(s.out_a) || !std::isfinite(s.out_b)) throw NumericalError("non-finite backend output for sample " + s.id);
        if (gap.back() > opt.flag_threshold) r.flagged.push_back(s);
    }
    r.n = r.samples.size();
    r.mae_stage_a = mean_absolute_error(pa, t);
    r.mae_stage_b = mean_absolute_error(pb, t);
    r.delta_conv = std::abs(r.mae_stage_a - r.mae_stage_b);
    r.max_abs_output_gap = *std::max_element(gap.begin(), gap.end());
    r.mean_abs_output_gap = pairwise_sum(gap) / static_cast<double>(gap.size());
    if (opt.best_train_val_mae) {
        r.best_train_val_mae = opt.best_train_val_mae;
        r.delta_val = std::abs(r.mae_stage_b - *opt.best_train_val_mae);
    }
    return r;
}

inline void write_parity_report(const ConsistencyReport& r, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / ("parity_" + r.split + ".json"), to_json_summary(r).dump(2) + "\n");
    std::ofstream tsv(dir / ("parity_" + r.split + "_samples.tsv"));
    tsv << "id\ttarget\tout_a\tout_b\tinput_sha256\n";
    tsv.precision(9);
    for (const auto& s : r.samples) tsv << s.id << '\t' << s.target << '\t' << s.out_a << '\t' << s.out_b << '\t' << s.input_sha256 << '\n';
}

} // namespace mobileage
