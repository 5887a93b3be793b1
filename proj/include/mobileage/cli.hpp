#pragma once

// Command layer: settings resolution, run directories, run manifests and one
// handler per pipeline command. tools/mobileage.cpp only turns argv into an
// Invocation and maps errors onto exit codes.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/bench.hpp"
#include "mobileage/checksum.hpp"
#include "mobileage/dataset.hpp"
#include "mobileage/evaluation.hpp"
#include "mobileage/hpo.hpp"
#include "mobileage/parity.hpp"
#include "mobileage/pretrained.hpp"
#include "mobileage/synthetic.hpp"
#include "mobileage/training.hpp"

namespace mobileage::cli {

inline constexpr const char* kToolVersion = "mobileage 0.1.0";

using Settings = std::map<std::string, std::string>;

enum class Kind { Text, Real, Integer, Bool, Path, Triple, List };

struct SettingDef {
    std::string key;
    std::string def;
    Kind kind = Kind::Text;
    std::string help;
    std::string env; // environment variable consulted between config files and flags
};

// ---------------------------------------------------------------------------
// Plain-text config files

inline std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

/// `key = value` lines; `[section]` prefixes following keys with
/// `section.`; `#` starts a comment.
inline Settings parse_config_text(std::string_view text, const std::string& origin)
{
    Settings out;
    std::string section;
    std::istringstream in{std::string(text)};
    int line_no = 0;
    for (std::string raw; std::getline(in, raw);) {
        ++line_no;
        const auto hash = raw.find('#');
        const auto line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto where = origin + ":" + std::to_string(line_no);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected `key = value`");
        auto key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(where + ": empty key");
        if (!section.empty()) key = section + "." + key;
        if (out.contains(key)) throw ConfigError(where + ": setting '" + key + "' given twice");
        out[key] = trim(line.substr(eq + 1));
    }
    return out;
}

inline Settings load_config_file(const std::filesystem::path& p)
{
    std::ifstream in(p);
    if (!in) throw ConfigError("config file not found: " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), p.string());
}

inline std::string format_config(const Settings& s)
{
    std::string out;
    for (const auto& [k, v] : s) out += k + " = " + v + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Typed access with field-level messages

inline std::vector<std::string> split_list(std::string_view s)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ' ' || c == ',' || c == '\t') {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline std::optional<std::int64_t> parse_integer(std::string_view s)
{
    std::int64_t v = 0;
    const auto* end = s.data() + s.size();
    const auto res = std::from_chars(s.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end) return std::nullopt;
    return v;
}

inline std::optional<bool> parse_bool(std::string_view s)
{
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    return std::nullopt;
}

inline void check_kind(const SettingDef& d, const std::string& v)
{
    auto bad = [&](const std::string& want) { return ConfigError("setting '" + d.key + "': expected " + want + ", got '" + v + "'"); };
    switch (d.kind) {
    case Kind::Real:
        if (!parse_number(v)) throw bad("a number");
        break;
    case Kind::Integer:
        if (!parse_integer(v)) throw bad("an integer");
        break;
    case Kind::Bool:
        if (!parse_bool(v)) throw bad("true or false");
        break;
    case Kind::Triple: {
        const auto parts = split_list(v);
        if (parts.size() != 3) throw bad("three numbers");
        for (const auto& p : parts)
            if (!parse_number(p)) throw bad("three numbers");
        break;
    }
    default: break;
    }
}

class Config {
public:
    Config() = default;
    explicit Config(Settings v) : v_(std::move(v)) {}

    [[nodiscard]] const Settings& values() const noexcept { return v_; }
    [[nodiscard]] bool has(const std::string& k) const { return v_.contains(k); }
    [[nodiscard]] const std::string& text(const std::string& k) const
    {
        const auto it = v_.find(k);
        if (it == v_.end()) throw ConfigError("setting '" + k + "' is not defined for this command");
        return it->second;
    }
    [[nodiscard]] double real(const std::string& k) const
    {
        const auto v = parse_number(text(k));
        if (!v) throw ConfigError("setting '" + k + "': expected a number, got '" + text(k) + "'");
        return *v;
    }
    [[nodiscard]] std::int64_t integer(const std::string& k) const
    {
        const auto v = parse_integer(text(k));
        if (!v) throw ConfigError("setting '" + k + "': expected an integer, got '" + text(k) + "'");
        return *v;
    }
    [[nodiscard]] int small_int(const std::string& k) const
    {
        const auto v = integer(k);
        if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) throw ConfigError("setting '" + k + "' is out of range");
        return static_cast<int>(v);
    }
    [[nodiscard]] std::size_t count(const std::string& k) const
    {
        const auto v = integer(k);
        if (v < 0) throw ConfigError("setting '" + k + "' must be >= 0");
        return static_cast<std::size_t>(v);
    }
    [[nodiscard]] std::uint64_t seed() const
    {
        const auto v = integer("seed");
        if (v < 0) throw ConfigError("setting 'seed' must be >= 0");
        return static_cast<std::uint64_t>(v);
    }
    [[nodiscard]] bool flag(const std::string& k) const
    {
        const auto v = parse_bool(text(k));
        if (!v) throw ConfigError("setting '" + k + "': expected true or false, got '" + text(k) + "'");
        return *v;
    }
    [[nodiscard]] std::filesystem::path path(const std::string& k) const { return text(k); }
    [[nodiscard]] std::filesystem::path required_path(const std::string& k, const std::string& producer) const
    {
        const auto& p = text(k);
        if (p.empty()) throw ConfigError("setting '" + k + "' is required" + (producer.empty() ? "" : " (produced by `mobileage " + producer + "`)"));
        return p;
    }
    [[nodiscard]] std::vector<double> reals(const std::string& k) const
    {
        std::vector<double> out;
        for (const auto& p : split_list(text(k))) {
            const auto v = parse_number(p);
            if (!v) throw ConfigError("setting '" + k + "': '" + p + "' is not a number");
            out.push_back(*v);
        }
        return out;
    }

private:
    Settings v_;
};

// ---------------------------------------------------------------------------
// Layered resolution: defaults < manifest < config file < environment < flags

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

inline std::optional<std::string> system_getenv(const std::string& name)
{
    const char* v = std::getenv(name.c_str());
    if (!v) return std::nullopt;
    return std::string(v);
}

struct Layers {
    Settings manifest;
    Settings config;
    Settings flags;
    EnvLookup env;
};

struct Resolved {
    Config config;
    std::map<std::string, std::string> sources; // key -> default|manifest|config|env|flag
};

inline Resolved resolve(const std::vector<SettingDef>& schema, const Layers& layers)
{
    std::set<std::string> known;
    for (const auto& d : schema) known.insert(d.key);
    auto reject_unknown = [&](const Settings& s, const std::string& where) {
        for (const auto& [k, _] : s)
            if (!known.contains(k)) throw ConfigError("unknown setting '" + k + "' in " + where);
    };
    reject_unknown(layers.manifest, "manifest");
    reject_unknown(layers.config, "config file");
    reject_unknown(layers.flags, "flags");

    Settings out;
    Resolved r;
    for (const auto& d : schema) {
        std::string v = d.def, src = "default";
        if (const auto it = layers.manifest.find(d.key); it != layers.manifest.end()) v = it->second, src = "manifest";
        if (const auto it = layers.config.find(d.key); it != layers.config.end()) v = it->second, src = "config";
        if (!d.env.empty() && layers.env)
            if (auto e = layers.env(d.env); e && !e->empty()) v = *e, src = "env";
        if (const auto it = layers.flags.find(d.key); it != layers.flags.end()) v = it->second, src = "flag";
        check_kind(d, v);
        out[d.key] = v;
        r.sources[d.key] = src;
    }
    r.config = Config(std::move(out));
    return r;
}

// ---------------------------------------------------------------------------
// Command schemas

inline std::vector<SettingDef> common_settings()
{
    return {{"seed", "42", Kind::Integer, "top-level seed; module seeds derive from it"},
            {"device", "cpu", Kind::Text, "execution device (only cpu is built in)", "MOBILEAGE_DEVICE"}};
}

inline std::vector<SettingDef> data_settings()
{
    return {{"samples", "", Kind::Path, "sample table written by `prepare`"},
            {"split", "", Kind::Path, "split manifest written by `split`"}};
}

inline std::vector<SettingDef> model_settings(const hpo::LockedConfig& d = hpo::paper_locked_config())
{
    auto num = [](double v) {
        std::ostringstream os;
        os << std::setprecision(17) << v;
        return os.str();
    };
    return {{"backbone_weights", "", Kind::Path, "backbone tensor archive (`init-backbone` or the torchvision converter)"},
            {"model.backbone", d.model.backbone, Kind::Text, "backbone architecture"},
            {"model.dropout", num(d.model.dropout), Kind::Real, "head dropout probability"},
            {"model.input_size", std::to_string(d.model.input_size), Kind::Integer, "input resolution"}};
}

inline std::vector<SettingDef> train_settings(const TrainSpec& d = hpo::paper_locked_config().train)
{
    auto num = [](double v) {
        std::ostringstream os;
        os << std::setprecision(17) << v;
        return os.str();
    };
    return {{"train.lr", num(d.lr), Kind::Real, "head learning rate"},
            {"train.batch_size", std::to_string(d.batch_size), Kind::Integer, "batch size"},
            {"train.epochs", std::to_string(d.epochs), Kind::Integer, "total epochs"},
            {"train.freeze_epochs", std::to_string(d.freeze_epochs), Kind::Integer, "epochs with a frozen backbone"},
            {"train.backbone_lr_mult", num(d.backbone_lr_mult), Kind::Real, "backbone lr as a fraction of the head lr"},
            {"train.clip_norm", num(d.clip_norm), Kind::Real, "global gradient-norm clip"},
            {"train.weight_decay", num(d.weight_decay), Kind::Real, "AdamW weight decay"},
            {"train.lr_min_ratio", num(d.lr_min_ratio), Kind::Real, "cosine floor as a fraction of the peak lr"},
            {"train.transform", d.transform, Kind::Text, "training transform pipeline"}};
}

struct CommandInfo {
    std::string name;
    std::string help;
    std::vector<SettingDef> settings;
};

inline std::vector<SettingDef> concat(std::initializer_list<std::vector<SettingDef>> parts)
{
    std::vector<SettingDef> out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

inline const std::vector<CommandInfo>& commands()
{
    static const std::vector<CommandInfo> all = [] {
        std::vector<CommandInfo> c;
        c.push_back({"synth", "render a synthetic face dataset with filename-encoded ages",
                     concat({common_settings(), {{"count", "500", Kind::Integer, "number of images"}, {"size", "200", Kind::Integer, "image side in pixels"}}})});
        c.push_back({"init-backbone", "write a seeded stand-in backbone archive",
                     concat({common_settings(),
                             {{"model.backbone", std::string(kMobileNetV3Large), Kind::Text, "backbone architecture"},
                              {"calibration_images", "32", Kind::Integer, "synthetic images used to calibrate BN statistics"}}})});
        c.push_back({"prepare", "curate raw images into a sample table",
                     concat({common_settings(),
                             {{"images", "", Kind::Path, "directory of images named `<age>_...`"},
                              {"index", "", Kind::Path, "two-column `path,age` index file"},
                              {"data_root", "", Kind::Path, "base for relative image/index paths", "MOBILEAGE_DATA_ROOT"}}})});
        c.push_back({"split", "stratified train/val/test split",
                     concat({common_settings(), {{"samples", "", Kind::Path, "sample table written by `prepare`"},
                                                 {"ratios", "0.7 0.1 0.2", Kind::Triple, "train val test fractions"}}})});
        c.push_back({"train", "two-stage fine-tuning with checkpoint selection on validation MAE",
                     concat({common_settings(), data_settings(), model_settings(), train_settings(),
                             {{"train.resume", "false", Kind::Bool, "continue an interrupted run from last.ckpt"}}})});
        c.push_back({"hpo-search", "hyperparameter search over lr, dropout, batch size and transform",
                     concat({common_settings(), data_settings(), model_settings(), train_settings(),
                             {{"hpo.budget", "40", Kind::Integer, "number of trials"},
                              {"hpo.epoch_cap", "60", Kind::Integer, "epochs per trial"},
                              {"hpo.lr_range", "0.0005 0.002", Kind::List, "log-uniform lr bounds"},
                              {"hpo.dropout_range", "0.1 0.3", Kind::List, "uniform dropout bounds"},
                              {"hpo.batch_sizes", "64 128", Kind::List, "batch size choices"},
                              {"hpo.transforms", "norm_256 norm_256_flip resize_colorjit_flip_blur", Kind::List, "transform choices"},
                              {"hpo.median_pruning", "false", Kind::Bool, "prune trials below the running median"},
                              {"hpo.log_test_mae", "false", Kind::Bool, "record held-out MAE per trial after selection"}}})});
        c.push_back({"hpo-finalize", "lock the best trial and run the single final training",
                     concat({common_settings(), data_settings(), model_settings(), train_settings(),
                             {{"study", "", Kind::Path, "study record written by `hpo-search`"},
                              {"final_epochs", "100", Kind::Integer, "epochs of the locked run"},
                              {"force", "false", Kind::Bool, "allow another locked run under a new run id"}}})});
        c.push_back({"evaluate", "MAE and per-bin breakdown of a checkpoint on one split",
                     concat({common_settings(), data_settings(),
                             {{"checkpoint", "", Kind::Path, "checkpoint written by `train` or `hpo-finalize`"},
                              {"on", "test", Kind::Text, "split to evaluate"},
                              {"batch_size", "32", Kind::Integer, "inference batch size"}}})});
        c.push_back({"export", "checkpoint -> portable graph -> deployment model",
                     concat({common_settings(), {{"checkpoint", "", Kind::Path, "checkpoint to export"}}})});
        c.push_back({"parity", "conversion consistency between two exported stages",
                     concat({common_settings(), data_settings(),
                             {{"portable", "", Kind::Path, "model.onnx written by `export`"},
                              {"deployment", "", Kind::Path, "model.mafb written by `export`"},
                              {"on", "val", Kind::Text, "split to compare on"},
                              {"train_log", "", Kind::Path, "epochs.jsonl of the training run, for the validation delta"},
                              {"max_samples", "0", Kind::Integer, "random subset size (0: whole split)"},
                              {"flag_threshold", "1.0", Kind::Real, "per-sample gap that gets flagged, in years"}}})});
        c.push_back({"bench", "host latency of an exported artifact",
                     concat({common_settings(),
                             {{"artifact", "", Kind::Path, "model.mafb, model.onnx or a checkpoint"},
                              {"runs", "20", Kind::Integer, "timed runs"},
                              {"warmup", "3", Kind::Integer, "untimed warmup runs"},
                              {"budget_ms", "30", Kind::Real, "latency budget"}}})});
        c.push_back({"report", "aggregate finished runs into one summary", common_settings()});
        return c;
    }();
    return all;
}

inline const CommandInfo& command_info(const std::string& name)
{
    for (const auto& c : commands())
        if (c.name == name) return c;
    throw ConfigError("unknown command '" + name + "'");
}

// ---------------------------------------------------------------------------
// Run directories and manifests

struct InputRef {
    std::string path;
    std::string sha256;
    friend bool operator==(const InputRef&, const InputRef&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(InputRef, path, sha256)

struct RunManifest {
    std::string run_id;
    std::string command;
    Settings config;
    std::map<std::string, std::string> sources;
    std::map<std::string, std::uint64_t> seeds;
    std::map<std::string, InputRef> inputs;
    std::map<std::string, std::string> artifacts; // path relative to the run directory -> sha256
    std::string started_at;
    std::string finished_at;
    std::string tool_version = kToolVersion;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunManifest, run_id, command, config, sources, seeds, inputs, artifacts, started_at, finished_at,
                                   tool_version)

inline RunManifest load_run_manifest(const std::filesystem::path& p)
{
    std::ifstream in(p);
    if (!in) throw DataError("run manifest not found: " + p.string());
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("corrupt run manifest: " + p.string());
    try {
        return j.get<RunManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed run manifest " + p.string() + ": " + e.what());
    }
}

struct RunLayout {
    std::filesystem::path root;
    [[nodiscard]] std::filesystem::path manifest() const { return root / "manifest.json"; }
    [[nodiscard]] std::filesystem::path checkpoints() const { return root / "checkpoints"; }
    [[nodiscard]] std::filesystem::path logs() const { return root / "logs"; }
    [[nodiscard]] std::filesystem::path reports() const { return root / "reports"; }
};

inline void validate_run_id(const std::string& id)
{
    if (id.empty() || id == "." || id == "..") throw ConfigError("run id must be a non-empty name");
    for (char c : id)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'))
            throw ConfigError("run id '" + id + "' may only contain letters, digits, '-', '_' and '.'");
}

/// A finished run (one with a manifest) is never touched without
/// `overwrite`; an unfinished one is kept only when resuming.
inline RunLayout open_run(const std::filesystem::path& runs_dir, const std::string& run_id, bool overwrite, bool resume)
{
    validate_run_id(run_id);
    RunLayout l{runs_dir / run_id};
    if (std::filesystem::exists(l.root)) {
        if (std::filesystem::exists(l.manifest())) {
            if (!overwrite) throw ConfigError("run '" + run_id + "' exists at " + l.root.string() + "; pass --overwrite to replace it");
            std::filesystem::remove_all(l.root);
        } else if (overwrite) {
            std::filesystem::remove_all(l.root);
        } else if (!resume) {
            throw ConfigError("run directory " + l.root.string() +
                              " exists but has no manifest (interrupted?); resume training with --train.resume true or pass --overwrite");
        }
    }
    for (const auto& d : {l.checkpoints(), l.logs(), l.reports()}) std::filesystem::create_directories(d);
    return l;
}

inline std::string utc_now()
{
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Files hash their bytes; directories hash their sorted listing with sizes.
inline std::string content_hash(const std::filesystem::path& p)
{
    if (std::filesystem::is_regular_file(p)) return sha256_file(p);
    std::vector<std::string> rows;
    for (const auto& e : std::filesystem::recursive_directory_iterator(p))
        if (e.is_regular_file())
            rows.push_back(std::filesystem::relative(e.path(), p).generic_string() + "\t" + std::to_string(e.file_size()));
    std::sort(rows.begin(), rows.end());
    Sha256 h;
    for (const auto& r : rows) h.update(r + "\n");
    return "dir:" + h.hex();
}

inline std::map<std::string, std::string> hash_tree(const std::filesystem::path& root)
{
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(e.path(), root).generic_string();
        if (rel == "manifest.json") continue;
        out[rel] = sha256_file(e.path());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Execution

struct Invocation {
    std::string command;
    std::string run_id; // empty: the command name
    std::filesystem::path runs_dir = "runs";
    bool overwrite = false;
    std::filesystem::path config_file;
    std::filesystem::path from_manifest;
    Settings flags;
    EnvLookup env = system_getenv;
    std::ostream* log = &std::cerr;
};

struct Context {
    const Config& config;
    RunLayout layout;
    std::string run_id;
    std::filesystem::path runs_dir;
    std::ostream& log;
    std::map<std::string, std::uint64_t> seeds;
    nlohmann::json summary = nlohmann::json::object();
};

struct Outcome {
    RunManifest manifest;
    RunLayout layout;
    nlohmann::json summary;
};

namespace detail {

inline std::string num(double v)
{
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

inline ModelSpec model_spec(const Config& c)
{
    ModelSpec m;
    m.backbone = c.text("model.backbone");
    m.dropout = c.real("model.dropout");
    m.input_size = c.small_int("model.input_size");
    m.validate();
    return m;
}

inline TrainSpec train_spec(const Config& c)
{
    TrainSpec t;
    t.lr = c.real("train.lr");
    t.batch_size = c.small_int("train.batch_size");
    t.epochs = c.small_int("train.epochs");
    t.freeze_epochs = c.small_int("train.freeze_epochs");
    t.backbone_lr_mult = c.real("train.backbone_lr_mult");
    t.clip_norm = c.real("train.clip_norm");
    t.weight_decay = c.real("train.weight_decay");
    t.lr_min_ratio = c.real("train.lr_min_ratio");
    t.transform = c.text("train.transform");
    t.seed = c.seed();
    t.validate();
    return t;
}

/// Settings that reproduce a locked configuration through `train --config`.
inline Settings locked_settings(const hpo::LockedConfig& l)
{
    return {{"model.backbone", l.model.backbone},
            {"model.dropout", num(l.model.dropout)},
            {"model.input_size", std::to_string(l.model.input_size)},
            {"train.lr", num(l.train.lr)},
            {"train.batch_size", std::to_string(l.train.batch_size)},
            {"train.epochs", std::to_string(l.train.epochs)},
            {"train.freeze_epochs", std::to_string(l.train.freeze_epochs)},
            {"train.backbone_lr_mult", num(l.train.backbone_lr_mult)},
            {"train.clip_norm", num(l.train.clip_norm)},
            {"train.weight_decay", num(l.train.weight_decay)},
            {"train.lr_min_ratio", num(l.train.lr_min_ratio)},
            {"train.transform", l.train.transform},
            {"seed", std::to_string(l.train.seed)}};
}

inline TensorMap backbone_weights(const Config& c, const ModelSpec& m)
{
    const auto p = c.path("backbone_weights");
    const std::string hint = " (create one with `mobileage init-backbone` or tools/convert_torchvision_backbone.py)";
    if (p.empty()) throw ConfigError("setting 'backbone_weights' is required" + hint);
    if (!std::filesystem::exists(p)) throw DataError("backbone weights not found: " + p.string() + hint);
    auto a = load_archive(p);
    if (a.metadata.contains("backbone") && a.metadata.at("backbone") != m.backbone)
        throw ConfigError("backbone weights " + p.string() + " are for '" + a.metadata.at("backbone").get<std::string>() +
                          "' but model.backbone is '" + m.backbone + "'");
    return std::move(a.tensors);
}

inline SplitDataset dataset(const Config& c, AccessAudit* audit)
{
    auto samples = read_samples_tsv(c.required_path("samples", "prepare"));
    auto manifest = load_manifest(c.required_path("split", "split"));
    return SplitDataset(std::move(samples), std::move(manifest), audit);
}

inline Checkpoint checkpoint(const Config& c)
{
    const auto p = c.required_path("checkpoint", "train");
    if (!std::filesystem::exists(p)) throw DataError("checkpoint not found: " + p.string() + " (produce it with `mobileage train` or `mobileage hpo-finalize`)");
    return load_checkpoint(p);
}

inline std::filesystem::path artifact(const Config& c, const std::string& key)
{
    const auto p = c.required_path(key, "export");
    if (!std::filesystem::exists(p)) throw DataError(key + " artifact not found: " + p.string() + " (produce it with `mobileage export`)");
    return p;
}

inline std::string epoch_line(const EpochRecord& r)
{
    std::ostringstream os;
    os << "epoch " << r.epoch << " [" << r.stage << "] loss " << std::fixed << std::setprecision(4) << r.train_loss << " val_mae "
       << r.val_mae << " lr " << std::scientific << std::setprecision(3) << r.lr_head;
    return os.str();
}

// ---- handlers

inline void cmd_synth(Context& ctx)
{
    const auto& c = ctx.config;
    const auto n = c.count("count");
    if (n == 0) throw ConfigError("setting 'count' must be positive");
    const int size = c.small_int("size");
    if (size < 32) throw ConfigError("setting 'size' must be >= 32");
    ctx.seeds["synth"] = c.seed();
    const auto plan = synthetic::write_dataset(ctx.layout.root / "images", n, c.seed(), size);
    ctx.summary = {{"images", (ctx.layout.root / "images").string()}, {"count", plan.size()}};
    ctx.log << "wrote " << plan.size() << " images to " << (ctx.layout.root / "images").string() << '\n';
}

inline void cmd_init_backbone(Context& ctx)
{
    const auto& c = ctx.config;
    const auto name = c.text("model.backbone");
    validate_backbone_name(name);
    ctx.seeds["backbone"] = c.seed();
    const auto archive = make_standin_backbone(name, c.seed(), c.small_int("calibration_images"));
    const auto out = ctx.layout.root / "backbone.mtns";
    save_archive(out, archive);
    ctx.summary = {{"backbone_weights", out.string()}, {"backbone", name}, {"tensors", archive.tensors.size()}};
    ctx.log << "wrote stand-in " << name << " weights to " << out.string() << '\n';
}

inline void cmd_prepare(Context& ctx)
{
    const auto& c = ctx.config;
    auto images = c.path("images"), index = c.path("index");
    if (images.empty() == index.empty()) throw ConfigError("set exactly one of 'images' or 'index'");
    const auto root = c.path("data_root");
    auto anchor = [&](std::filesystem::path p) {
        if (p.is_relative() && !root.empty()) p = root / p;
        return std::filesystem::absolute(p).lexically_normal();
    };
    const auto records = images.empty() ? records_from_index(anchor(index)) : records_from_directory(anchor(images));
    const auto res = curate(records);
    write_samples_tsv(ctx.layout.root / "samples.tsv", res.samples);
    nlohmann::json log = res.log;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [ref, why] : res.log.rejections) rows.push_back({{"image_ref", ref}, {"reason", reject_reason_name(why)}});
    log["rejections"] = rows;
    write_json(ctx.layout.reports() / "curation.json", log);
    ctx.summary = {{"samples", (ctx.layout.root / "samples.tsv").string()}, {"total", res.log.total}, {"kept", res.log.kept}};
    ctx.log << "kept " << res.log.kept << " of " << res.log.total << " records\n";
}

inline void cmd_split(Context& ctx)
{
    const auto& c = ctx.config;
    const auto samples_path = c.required_path("samples", "prepare");
    const auto samples = read_samples_tsv(samples_path);
    const auto r = c.reals("ratios");
    SplitRatios ratios{r.at(0), r.at(1), r.at(2)};
    ratios.validate();
    ctx.seeds["split"] = c.seed();
    auto m = stratified_split(samples, ratios, c.seed());
    const auto curation = samples_path.parent_path() / "reports" / "curation.json";
    if (std::filesystem::exists(curation)) m.curation_log = nlohmann::json::parse(std::ifstream(curation)).get<CurationLog>();
    write_file_atomic(ctx.layout.root / "split.json", serialize_manifest(m));
    std::size_t binned = 0;
    for (const auto& [_, bc] : m.bin_counts) binned += bc.total();
    ctx.summary = {{"split", (ctx.layout.root / "split.json").string()},
                   {"n", m.size()},
                   {"bin_count_total", binned},
                   {"train", m.count(Split::Train)},
                   {"val", m.count(Split::Val)},
                   {"test", m.count(Split::Test)},
                   {"degenerate_bins", m.degenerate_bins}};
    ctx.log << "split " << m.size() << " samples: " << m.count(Split::Train) << " / " << m.count(Split::Val) << " / " << m.count(Split::Test) << '\n';
}

inline void cmd_train(Context& ctx)
{
    const auto& c = ctx.config;
    const auto ms = model_spec(c);
    const auto ts = train_spec(c);
    const auto weights = backbone_weights(c, ms);
    AccessAudit audit;
    const auto data = dataset(c, &audit);
    const FileImageSource files;
    ctx.seeds["train"] = ts.seed;
    ctx.seeds["head_init"] = derive_seed(ts.seed, 0x4EAD);
    auto model = build(ms, weights, ctx.seeds["head_init"]);

    RunOptions o;
    o.images = &files;
    o.out_dir = ctx.layout.root;
    o.resume = c.flag("train.resume");
    o.on_epoch = [&](const EpochRecord& r, AgeModel&) { ctx.log << epoch_line(r) << '\n'; };
    const auto res = run(*model, data, ts, o);

    ctx.summary = {{"checkpoint", (ctx.layout.checkpoints() / "best.ckpt").string()},
                   {"train_log", (ctx.layout.logs() / "epochs.jsonl").string()},
                   {"best_epoch", res.policy.best_epoch},
                   {"best_val_mae", res.policy.best_value},
                   {"epochs", res.records.size()},
                   {"transform", ts.transform},
                   {"test_reads", audit.reads(Split::Test)}};
    write_json(ctx.layout.reports() / "train.json", ctx.summary);
}

inline void cmd_hpo_search(Context& ctx)
{
    const auto& c = ctx.config;
    const auto ms = model_spec(c);
    const auto base = train_spec(c);
    const auto weights = backbone_weights(c, ms);
    AccessAudit audit;
    const auto data = dataset(c, &audit);
    const FileImageSource files;

    hpo::SearchSpace space;
    const auto lr = c.reals("hpo.lr_range"), dr = c.reals("hpo.dropout_range");
    if (lr.size() != 2) throw ConfigError("setting 'hpo.lr_range' needs two numbers");
    if (dr.size() != 2) throw ConfigError("setting 'hpo.dropout_range' needs two numbers");
    space.lr_min = lr[0], space.lr_max = lr[1];
    space.dropout_min = dr[0], space.dropout_max = dr[1];
    space.batch_sizes.clear();
    for (double b : c.reals("hpo.batch_sizes")) space.batch_sizes.push_back(static_cast<int>(b));
    space.transforms = split_list(c.text("hpo.transforms"));
    space.freeze_epochs = base.freeze_epochs;
    space.backbone_lr_mult = base.backbone_lr_mult;

    hpo::SearchOptions so;
    so.study_id = ctx.run_id;
    so.budget = c.small_int("hpo.budget");
    so.epoch_cap = c.small_int("hpo.epoch_cap");
    so.seed = c.seed();
    so.median_pruning = c.flag("hpo.median_pruning");
    so.log_test_mae = c.flag("hpo.log_test_mae");
    so.on_trial = [&](const hpo::TrialRecord& t) {
        ctx.log << "trial " << t.trial_id << " " << nlohmann::json(t.status).get<std::string>() << " val_mae_best " << t.val_mae_best
                << " (lr " << t.config.lr << ", dropout " << t.config.dropout << ", batch " << t.config.batch_size << ", "
                << t.config.transform << ")\n";
    };
    ctx.seeds["study"] = so.seed;
    hpo::TrainingTrialRunner runner(ms, weights, data, files, base, ctx.layout.root);
    const auto study = hpo::search(space, runner, so, &audit);
    hpo::save_study(ctx.layout.root / "study.json", study);

    std::map<std::string, int> status;
    for (const auto& t : study.trials) ++status[nlohmann::json(t.status).get<std::string>()];
    ctx.summary = {{"study", (ctx.layout.root / "study.json").string()},
                   {"best_trial_id", study.best_trial_id},
                   {"best_val_mae", study.best_val_mae},
                   {"best_config", study.best_config},
                   {"trials", status},
                   {"test_reads_at_selection", study.test_reads_at_selection}};
    write_json(ctx.layout.reports() / "hpo-search.json", ctx.summary);
}

inline void cmd_hpo_finalize(Context& ctx)
{
    const auto& c = ctx.config;
    const auto study_path = c.required_path("study", "hpo-search");
    const auto study = hpo::load_study(study_path);
    const auto ms = model_spec(c);
    const auto base = train_spec(c);
    const auto locked = hpo::lock_config(study, ms, base, c.small_int("final_epochs"));
    hpo::save_locked(ctx.layout.root / "locked.json", locked);
    write_file_atomic(ctx.layout.root / "locked.cfg", "# locked from study " + study.study_id + ", trial " +
                                                          std::to_string(locked.source_trial_id) + "\n" + format_config(locked_settings(locked)));

    const auto weights = backbone_weights(c, locked.model);
    AccessAudit audit;
    const auto data = dataset(c, &audit);
    const FileImageSource files;
    hpo::FinalizeOptions fo;
    fo.run_id = ctx.run_id;
    fo.force = c.flag("force");
    fo.registry = study_path.parent_path() / "locked_runs.json";
    fo.out_dir = ctx.layout.root;
    ctx.seeds["train"] = locked.train.seed;
    ctx.seeds["head_init"] = derive_seed(locked.train.seed, 0x4EAD);
    const auto rep = hpo::finalize(locked, weights, data, files, fo, audit);

    nlohmann::json j = rep;
    j["locked"] = hpo::locked_body(locked);
    j["source_trial_id"] = locked.source_trial_id;
    j["checkpoint"] = (ctx.layout.checkpoints() / "best.ckpt").string();
    j["train_log"] = (ctx.layout.logs() / "epochs.jsonl").string();
    write_json(ctx.layout.reports() / "final.json", j);
    ctx.summary = j;
    ctx.log << "locked run: best epoch " << rep.best_epoch << ", val MAE " << rep.best_val_mae << ", held-out MAE " << rep.test_mae << '\n';
}

inline void cmd_evaluate(Context& ctx)
{
    const auto& c = ctx.config;
    const auto ck = checkpoint(c);
    auto model = model_from_checkpoint(ck);
    const auto data = dataset(c, nullptr);
    const FileImageSource files;
    const Split which = parse_split(c.text("on"));
    EvalOptions eo;
    eo.batch_size = c.count("batch_size");
    ModelPredictor p(*model);
    const auto r = evaluate(p, data, which, files, eo);
    for (const auto& [id, why] : r.failures) ctx.log << "warning: excluded " << id << ": " << why << '\n';
    nlohmann::json full = r;
    full["checkpoint"] = c.text("checkpoint");
    write_json(ctx.layout.reports() / ("eval_" + r.split + ".json"), full);
    emit_diagnostics(r, ctx.layout.reports(), "eval_" + r.split);
    const auto tf = ck.extra.contains("train_spec") ? ck.extra.at("train_spec").value("transform", "") : std::string{};
    ctx.summary = {{"split", r.split}, {"n", r.n}, {"mae", r.mae}, {"excluded", r.failures.size()}, {"checkpoint", c.text("checkpoint")},
                   {"transform", tf}};
    write_json(ctx.layout.reports() / "evaluate.json", ctx.summary);
    ctx.log << r.split << " MAE " << r.mae << " over " << r.n << " samples\n";
}

inline void cmd_export(Context& ctx)
{
    const auto& c = ctx.config;
    const auto ck = checkpoint(c);
    const auto chain = export_chain(c.path("checkpoint"), ctx.layout.root / "artifacts");
    const auto counts = model_from_checkpoint(ck)->count_params_and_flops();
    ctx.summary = {{"artifacts", chain},
                   {"portable", (ctx.layout.root / "artifacts" / kPortableFile).string()},
                   {"deployment", (ctx.layout.root / "artifacts" / kDeploymentFile).string()},
                   {"params", counts.params},
                   {"mult_adds", counts.mult_adds},
                   {"counting_convention", counts.convention},
                   {"deployment_mib", static_cast<double>(chain.back().size_bytes) / (1024.0 * 1024.0)}};
    write_json(ctx.layout.reports() / "export.json", ctx.summary);
    ctx.log << "exported " << chain.size() - 1 << " artifacts; deployment model " << chain.back().size_bytes << " bytes\n";
}

inline void cmd_parity(Context& ctx)
{
    const auto& c = ctx.config;
    PortableBackend a(artifact(c, "portable"));
    DeploymentBackend b(artifact(c, "deployment"));
    const auto data = dataset(c, nullptr);
    const FileImageSource files;
    const Split which = parse_split(c.text("on"));
    ParityOptions po;
    po.split = std::string(split_name(which));
    po.max_samples = c.count("max_samples");
    po.subset_seed = derive_seed(c.seed(), 0x9A817);
    po.flag_threshold = c.real("flag_threshold");
    ctx.seeds["parity_subset"] = po.subset_seed;
    if (const auto log = c.path("train_log"); !log.empty()) {
        if (!std::filesystem::exists(log)) throw DataError("training log not found: " + log.string() + " (produced by `mobileage train`)");
        po.best_train_val_mae = best_val_mae_from_log(read_epoch_log(log));
    }
    const auto r = run_parity(a, b, data.split(which), files, po);
    write_parity_report(r, ctx.layout.reports());
    ctx.summary = to_json_summary(r);
    write_json(ctx.layout.reports() / "parity.json", ctx.summary);
    ctx.log << "parity on " << r.split << " (n=" << r.n << "): MAE " << r.mae_stage_a << " vs " << r.mae_stage_b << ", delta_conv "
            << r.delta_conv << ", max gap " << r.max_abs_output_gap << '\n';
}

/// Owns the model behind a CheckpointBackend.
class OwnedCheckpointBackend final : public Backend {
public:
    explicit OwnedCheckpointBackend(const std::filesystem::path& p) : model_(model_from_checkpoint(load_checkpoint(p))), inner_(*model_) {}
    [[nodiscard]] std::string name() const override { return inner_.name(); }
    Tensor infer(const Tensor& x) override { return inner_.infer(x); }

private:
    std::unique_ptr<AgeModel> model_;
    CheckpointBackend inner_;
};

inline void cmd_bench(Context& ctx)
{
    const auto& c = ctx.config;
    const auto path = c.required_path("artifact", "export");
    if (!std::filesystem::exists(path)) throw DataError("artifact not found: " + path.string() + " (produce it with `mobileage export`)");
    const auto ext = path.extension().string();
    std::function<std::unique_ptr<Backend>()> factory;
    if (ext == ".mafb") factory = [&] { return std::make_unique<DeploymentBackend>(path); };
    else if (ext == ".onnx") factory = [&] { return std::make_unique<PortableBackend>(path); };
    else if (ext == ".ckpt") factory = [&] { return std::unique_ptr<Backend>(std::make_unique<OwnedCheckpointBackend>(path)); };
    else throw ConfigError("setting 'artifact': unsupported file type '" + ext + "' (expected .mafb, .onnx or .ckpt)");
    ctx.seeds["bench_input"] = c.seed();
    const auto b = bench::benchmark(path.filename().string(), factory, c.small_int("runs"), c.small_int("warmup"), bench::SteadyClock{}, c.seed());
    const auto budget = bench::report_budget(b, c.real("budget_ms"));
    const bench::DeviceReference ref;
    ctx.summary = {{"bench", b},
                   {"budget", budget},
                   {"device_reference", {{"init_ms", ref.init_ms}, {"avg_ms", ref.avg_ms}, {"std_ms", ref.std_ms}, {"runs", ref.runs}}}};
    write_json(ctx.layout.reports() / "bench.json", ctx.summary);
    ctx.log << std::fixed << std::setprecision(2) << "init " << b.init_ms << " ms, avg " << b.avg_ms << " ms, std " << b.std_ms << " ms over "
            << b.runs << " runs; budget " << budget.budget_ms << " ms " << (budget.pass ? "PASS" : "FAIL") << '\n';
}

struct FinishedRun {
    RunManifest manifest;
    std::filesystem::path root;
    nlohmann::json report(const std::string& name) const
    {
        const auto p = root / "reports" / name;
        if (!std::filesystem::exists(p)) return nullptr;
        return nlohmann::json::parse(std::ifstream(p));
    }
};

inline std::string cell(const nlohmann::json& v, int precision = 4)
{
    if (v.is_null()) return "-";
    if (v.is_number_float()) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(precision) << v.get<double>();
        return os.str();
    }
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

inline void cmd_report(Context& ctx)
{
    std::vector<FinishedRun> runs;
    if (std::filesystem::is_directory(ctx.runs_dir))
        for (const auto& e : std::filesystem::directory_iterator(ctx.runs_dir)) {
            const auto m = e.path() / "manifest.json";
            if (!e.is_directory() || e.path().filename() == ctx.run_id || !std::filesystem::exists(m)) continue;
            runs.push_back({load_run_manifest(m), e.path()});
        }
    std::sort(runs.begin(), runs.end(), [](const FinishedRun& a, const FinishedRun& b) {
        return std::tie(a.manifest.finished_at, a.manifest.run_id) < std::tie(b.manifest.finished_at, b.manifest.run_id);
    });
    auto latest = [&](const std::string& cmd) -> const FinishedRun* {
        const FinishedRun* r = nullptr;
        for (const auto& x : runs)
            if (x.manifest.command == cmd) r = &x;
        return r;
    };

    nlohmann::json s = {{"runs", runs.size()}, {"mae", nullptr}, {"delta_conv", nullptr}, {"delta_val", nullptr}, {"avg_ms", nullptr},
                        {"params", nullptr},   {"mult_adds", nullptr}};
    std::ostringstream md;
    md << "# Pipeline summary\n\n";

    // Table 1 layout: training pipeline ablation
    md << "## Training runs\n\n| run | transform | epochs | best epoch | best val MAE | held-out MAE |\n|---|---|---|---|---|---|\n";
    nlohmann::json ablation = nlohmann::json::array();
    for (const auto& r : runs) {
        if (r.manifest.command != "train") continue;
        const auto t = r.report("train.json");
        nlohmann::json test = nullptr;
        for (const auto& e : runs)
            if (e.manifest.command == "evaluate" && e.manifest.config.at("on") == "test" &&
                std::filesystem::path(e.manifest.config.at("checkpoint")) == std::filesystem::path(t.value("checkpoint", "")))
                test = e.report("evaluate.json").at("mae");
        ablation.push_back({{"run_id", r.manifest.run_id}, {"transform", t.at("transform")}, {"best_val_mae", t.at("best_val_mae")}, {"test_mae", test}});
        md << "| " << r.manifest.run_id << " | " << cell(t.at("transform")) << " | " << cell(t.at("epochs")) << " | " << cell(t.at("best_epoch"))
           << " | " << cell(t.at("best_val_mae")) << " | " << cell(test) << " |\n";
    }
    s["training_runs"] = ablation;

    // Tables 1/2 layout: search and locked run
    if (const auto* r = latest("hpo-search")) {
        const auto h = r->report("hpo-search.json");
        s["search"] = h;
        md << "\n## Search\n\nbest trial " << cell(h.at("best_trial_id")) << ", val MAE " << cell(h.at("best_val_mae")) << ", config "
           << h.at("best_config").dump() << "\n";
    }
    if (const auto* r = latest("hpo-finalize")) {
        const auto f = r->report("final.json");
        s["final"] = f;
        s["mae"] = f.at("test_mae");
        const auto& tr = f.at("locked").at("train");
        md << "\n## Locked run\n\n| item | value |\n|---|---|\n"
           << "| learning rate | " << cell(tr.at("lr"), 7) << " |\n| batch size | " << cell(tr.at("batch_size")) << " |\n"
           << "| dropout | " << cell(f.at("locked").at("model").at("dropout"), 5) << " |\n| backbone lr mult | " << cell(tr.at("backbone_lr_mult"), 2)
           << " |\n| epochs | " << cell(tr.at("epochs")) << " |\n| transform | " << cell(tr.at("transform")) << " |\n| best epoch | "
           << cell(f.at("best_epoch")) << " |\n| held-out MAE | " << cell(f.at("test_mae")) << " |\n";
    }
    if (s["mae"].is_null())
        for (const auto& r : runs)
            if (r.manifest.command == "evaluate" && r.manifest.config.at("on") == "test") s["mae"] = r.report("evaluate.json").at("mae");

    // Table 3 layout: complexity
    if (const auto* r = latest("export")) {
        const auto e = r->report("export.json");
        s["params"] = e.at("params");
        s["mult_adds"] = e.at("mult_adds");
        s["deployment_mib"] = e.at("deployment_mib");
        md << "\n## Complexity\n\n| parameters | mult-adds | deployment size (MiB) |\n|---|---|---|\n| " << cell(e.at("params")) << " | "
           << cell(e.at("mult_adds")) << " | " << cell(e.at("deployment_mib"), 2) << " |\n";
    }

    // Table 4 layout: conversion consistency
    if (const auto* r = latest("parity")) {
        const auto p = r->report("parity.json");
        s["parity"] = p;
        s["delta_conv"] = p.at("delta_conv");
        s["delta_val"] = p.at("delta_val");
        md << "\n## Conversion consistency (" << cell(p.at("split")) << ", n=" << cell(p.at("n")) << ")\n\n| metric | value |\n|---|---|\n"
           << "| portable MAE | " << cell(p.at("mae_stage_a")) << " |\n| deployment MAE | " << cell(p.at("mae_stage_b")) << " |\n"
           << "| delta_conv | " << cell(p.at("delta_conv"), 6) << " |\n| best training val MAE | " << cell(p.at("best_train_val_mae")) << " |\n"
           << "| delta_val | " << cell(p.at("delta_val")) << " |\n| max per-sample gap | " << cell(p.at("max_abs_output_gap"), 6) << " |\n";
    }

    // Table 5 layout: latency
    if (const auto* r = latest("bench")) {
        const auto b = r->report("bench.json");
        s["bench"] = b;
        s["avg_ms"] = b.at("bench").at("avg_ms");
        const auto& d = b.at("device_reference");
        md << "\n## Latency (host)\n\n| | init (ms) | avg (ms) | std (ms) | runs |\n|---|---|---|---|---|\n| host | " << cell(b.at("bench").at("init_ms"), 1)
           << " | " << cell(b.at("bench").at("avg_ms"), 1) << " | " << cell(b.at("bench").at("std_ms"), 1) << " | " << cell(b.at("bench").at("runs"))
           << " |\n| device reference | " << cell(d.at("init_ms"), 1) << " | " << cell(d.at("avg_ms"), 1) << " | " << cell(d.at("std_ms"), 1)
           << " | " << cell(d.at("runs")) << " |\n\nbudget " << cell(b.at("budget").at("budget_ms"), 1) << " ms: "
           << (b.at("budget").at("pass").get<bool>() ? "pass" : "fail") << "\n";
    }

    write_json(ctx.layout.reports() / "summary.json", s);
    write_file_atomic(ctx.layout.reports() / "summary.md", md.str());
    ctx.summary = s;
    ctx.log << md.str();
}

} // namespace detail

using Handler = void (*)(Context&);

inline Handler handler_for(const std::string& command)
{
    static const std::map<std::string, Handler> table{
        {"synth", detail::cmd_synth},       {"init-backbone", detail::cmd_init_backbone}, {"prepare", detail::cmd_prepare},
        {"split", detail::cmd_split},       {"train", detail::cmd_train},                 {"hpo-search", detail::cmd_hpo_search},
        {"hpo-finalize", detail::cmd_hpo_finalize}, {"evaluate", detail::cmd_evaluate},   {"export", detail::cmd_export},
        {"parity", detail::cmd_parity},     {"bench", detail::cmd_bench},                 {"report", detail::cmd_report}};
    const auto it = table.find(command);
    if (it == table.end()) throw ConfigError("unknown command '" + command + "'");
    return it->second;
}

/// Resolve settings for `inv` without running anything.
inline Resolved resolve_invocation(const Invocation& inv)
{
    const auto& info = command_info(inv.command);
    Layers layers;
    layers.env = inv.env;
    layers.flags = inv.flags;
    if (!inv.from_manifest.empty()) {
        const auto m = load_run_manifest(inv.from_manifest);
        if (m.command != inv.command)
            throw ConfigError("manifest " + inv.from_manifest.string() + " records command '" + m.command + "', not '" + inv.command + "'");
        layers.manifest = m.config;
    }
    if (!inv.config_file.empty()) layers.config = load_config_file(inv.config_file);
    return resolve(info.settings, layers);
}

inline Outcome execute(const Invocation& inv)
{
    const auto resolved = resolve_invocation(inv);
    const auto& cfg = resolved.config;
    if (cfg.text("device") != "cpu")
        throw ConfigError("setting 'device': '" + cfg.text("device") + "' is not available in this build (supported: cpu)");

    const std::string run_id = inv.run_id.empty() ? inv.command : inv.run_id;
    const bool resume = cfg.has("train.resume") && cfg.flag("train.resume");
    const auto started = utc_now();
    const auto layout = open_run(inv.runs_dir, run_id, inv.overwrite, resume);

    Context ctx{cfg, layout, run_id, inv.runs_dir, *inv.log, {{"seed", cfg.seed()}}, nlohmann::json::object()};
    handler_for(inv.command)(ctx);

    RunManifest m;
    m.run_id = run_id;
    m.command = inv.command;
    m.config = cfg.values();
    m.sources = resolved.sources;
    m.seeds = ctx.seeds;
    for (const auto& d : command_info(inv.command).settings) {
        if (d.kind != Kind::Path || d.key == "data_root") continue;
        const auto& p = cfg.text(d.key);
        if (!p.empty() && std::filesystem::exists(p)) m.inputs[d.key] = {p, content_hash(p)};
    }
    if (inv.command == "report")
        for (const auto& e : std::filesystem::directory_iterator(inv.runs_dir))
            if (e.path().filename() != run_id && std::filesystem::exists(e.path() / "manifest.json"))
                m.inputs["run:" + e.path().filename().string()] = {(e.path() / "manifest.json").string(), sha256_file(e.path() / "manifest.json")};
    m.artifacts = hash_tree(layout.root);
    m.started_at = started;
    m.finished_at = utc_now();
    detail::write_json(layout.manifest(), m);
    return {m, layout, ctx.summary};
}

} // namespace mobileage::cli
