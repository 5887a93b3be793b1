#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "fixtures.hpp"
#include "mobileage/cli.hpp"

using namespace mobileage;
using namespace mobileage::cli;

namespace {

std::ostringstream sink;

Invocation inv(const std::filesystem::path& runs, std::string command, Settings flags = {}, std::string run_id = {})
{
    Invocation i;
    i.command = std::move(command);
    i.run_id = std::move(run_id);
    i.runs_dir = runs;
    i.flags = std::move(flags);
    i.env = [](const std::string&) -> std::optional<std::string> { return std::nullopt; };
    i.log = &sink;
    return i;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Shared prepared data: synth -> init-backbone -> prepare -> split.
struct Prepared {
    std::filesystem::path runs;
    std::string samples, split, weights;
};

const Prepared& prepared()
{
    static const Prepared p = [] {
        Prepared r{fixtures::scratch("cli_pipeline")};
        execute(inv(r.runs, "synth", {{"count", "240"}, {"size", "48"}, {"seed", "3"}}));
        execute(inv(r.runs, "init-backbone", {{"model.backbone", "tiny"}, {"calibration_images", "8"}}));
        execute(inv(r.runs, "prepare", {{"images", (r.runs / "synth" / "images").string()}}));
        r.samples = (r.runs / "prepare" / "samples.tsv").string();
        execute(inv(r.runs, "split", {{"samples", r.samples}}));
        r.split = (r.runs / "split" / "split.json").string();
        r.weights = (r.runs / "init-backbone" / "backbone.mtns").string();
        return r;
    }();
    return p;
}

int run_binary(const std::string& args)
{
    const int rc = std::system((std::string(MOBILEAGE_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

} // namespace

TEST(ConfigText, SectionsCommentsAndErrors)
{
    const auto s = parse_config_text("seed = 7  # top\n[train]\nlr = 0.001\n\n# note\nbatch_size=32\n", "t.cfg");
    EXPECT_EQ(s, (Settings{{"seed", "7"}, {"train.lr", "0.001"}, {"train.batch_size", "32"}}));
    EXPECT_THROW(parse_config_text("a = 1\na = 2\n", "t"), ConfigError);
    EXPECT_THROW(parse_config_text("just words\n", "t"), ConfigError);
    EXPECT_THROW(parse_config_text("[open\n", "t"), ConfigError);
    try {
        (void)parse_config_text("x = 1\n = 2\n", "f.cfg");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("f.cfg:2"), std::string::npos) << e.what();
    }
    EXPECT_EQ(parse_config_text(format_config(s), "again"), s);
}

TEST(Resolve, PrecedenceTable)
{
    const std::vector<SettingDef> schema{{"k", "d", Kind::Text, "", "K_ENV"}};
    struct Row {
        std::optional<std::string> manifest, config, env, flag;
        std::string value, source;
    };
    const std::vector<Row> rows{
        {{}, {}, {}, {}, "d", "default"},
        {"m", {}, {}, {}, "m", "manifest"},
        {"m", "c", {}, {}, "c", "config"},
        {{}, "c", "e", {}, "e", "env"},
        {"m", "c", "e", "f", "f", "flag"},
        {{}, {}, "e", "f", "f", "flag"},
        {"m", {}, "", {}, "m", "manifest"}, // empty env var is ignored
        {{}, "c", {}, "f", "f", "flag"},
    };
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        Layers l;
        if (r.manifest) l.manifest["k"] = *r.manifest;
        if (r.config) l.config["k"] = *r.config;
        if (r.flag) l.flags["k"] = *r.flag;
        l.env = [&](const std::string& n) -> std::optional<std::string> {
            EXPECT_EQ(n, "K_ENV");
            return r.env;
        };
        const auto res = resolve(schema, l);
        EXPECT_EQ(res.config.text("k"), r.value) << "row " << i;
        EXPECT_EQ(res.sources.at("k"), r.source) << "row " << i;
    }
}

TEST(Resolve, FieldLevelErrors)
{
    const std::vector<SettingDef> schema{{"train.lr", "0.001", Kind::Real, ""},
                                         {"n", "3", Kind::Integer, ""},
                                         {"on", "true", Kind::Bool, ""},
                                         {"r", "0.7 0.1 0.2", Kind::Triple, ""}};
    auto message = [&](Settings flags) {
        try {
            (void)resolve(schema, Layers{{}, {}, std::move(flags), {}});
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_EQ(message({{"train.lr", "x"}}), "setting 'train.lr': expected a number, got 'x'");
    EXPECT_EQ(message({{"n", "2.5"}}), "setting 'n': expected an integer, got '2.5'");
    EXPECT_EQ(message({{"on", "maybe"}}), "setting 'on': expected true or false, got 'maybe'");
    EXPECT_EQ(message({{"r", "0.5 0.5"}}), "setting 'r': expected three numbers, got '0.5 0.5'");
    EXPECT_EQ(message({{"bogus", "1"}}), "unknown setting 'bogus' in flags");
    EXPECT_EQ(message({{"r", "0.5,0.25,0.25"}}), "no error");
}

TEST(Resolve, TrainDefaultsAreTheLockedConfiguration)
{
    const auto res = resolve(command_info("train").settings, {});
    const auto t = cli::detail::train_spec(res.config);
    const auto locked = hpo::paper_locked_config();
    EXPECT_EQ(t.lr, locked.train.lr);
    EXPECT_EQ(t.batch_size, locked.train.batch_size);
    EXPECT_EQ(t.epochs, locked.train.epochs);
    EXPECT_EQ(t.freeze_epochs, locked.train.freeze_epochs);
    EXPECT_EQ(t.backbone_lr_mult, locked.train.backbone_lr_mult);
    EXPECT_EQ(t.transform, locked.train.transform);
    EXPECT_EQ(cli::detail::model_spec(res.config).dropout, locked.model.dropout);
}

TEST(RunDir, RefusesToClobberAndValidatesIds)
{
    const auto runs = fixtures::scratch("cli_rundir");
    EXPECT_THROW(open_run(runs, "../x", false, false), ConfigError);
    EXPECT_THROW(open_run(runs, "", false, false), ConfigError);

    execute(inv(runs, "synth", {{"count", "5"}, {"size", "32"}}, "s"));
    try {
        execute(inv(runs, "synth", {{"count", "5"}, {"size", "32"}}, "s"));
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("--overwrite"), std::string::npos);
    }
    // an interrupted run (no manifest) is not silently reused either
    std::filesystem::create_directories(runs / "half");
    EXPECT_THROW(open_run(runs, "half", false, false), ConfigError);
    EXPECT_NO_THROW(open_run(runs, "half", false, true));
}

TEST(Manifest, RecordsConfigSeedsAndHashes)
{
    const auto& p = prepared();
    const auto m = load_run_manifest(p.runs / "split" / "manifest.json");
    EXPECT_EQ(m.command, "split");
    EXPECT_EQ(m.config.at("ratios"), "0.7 0.1 0.2");
    EXPECT_EQ(m.sources.at("samples"), "flag");
    EXPECT_EQ(m.sources.at("seed"), "default");
    EXPECT_EQ(m.seeds.at("split"), 42U);
    EXPECT_EQ(m.inputs.at("samples").sha256, sha256_file(p.samples));
    EXPECT_EQ(m.artifacts.at("split.json"), sha256_file(p.split));
    EXPECT_EQ(m.tool_version, kToolVersion);
    EXPECT_LE(m.started_at, m.finished_at);
}

TEST(Manifest, ReplayAndOverwriteReproduceArtifacts)
{
    const auto& p = prepared();
    auto replay = inv(p.runs, "split", {}, "split_replay");
    replay.from_manifest = p.runs / "split" / "manifest.json";
    const auto out = execute(replay);
    EXPECT_EQ(slurp(out.layout.root / "split.json"), slurp(p.split));
    EXPECT_EQ(out.manifest.sources.at("samples"), "manifest");

    auto again = inv(p.runs, "split", {{"samples", p.samples}}, "split_replay");
    again.overwrite = true;
    EXPECT_EQ(slurp(execute(again).layout.root / "split.json"), slurp(p.split));

    // a manifest from another command is rejected
    auto wrong = inv(p.runs, "train", {}, "nope");
    wrong.from_manifest = p.runs / "split" / "manifest.json";
    EXPECT_THROW(execute(wrong), ConfigError);
}

TEST(Commands, SplitBinCountsCoverDataset)
{
    const auto& p = prepared();
    const auto m = load_manifest(p.split);
    EXPECT_EQ(m.size(), 240U);
    std::size_t total = 0;
    for (const auto& [_, c] : m.bin_counts) total += c.total();
    EXPECT_EQ(total, 240U);
    EXPECT_EQ(m.count(Split::Train) + m.count(Split::Val) + m.count(Split::Test), 240U);
    EXPECT_TRUE(m.curation_log.has_value());
}

TEST(Commands, ConfigFileAndEnvironment)
{
    const auto& p = prepared();
    const auto dir = fixtures::scratch("cli_cfg");
    std::ofstream(dir / "split.cfg") << "ratios = 0.6 0.2 0.2\nseed = 9\n";
    auto i = inv(dir / "runs", "split", {{"samples", p.samples}, {"seed", "11"}});
    i.config_file = dir / "split.cfg";
    const auto out = execute(i);
    EXPECT_EQ(out.manifest.config.at("ratios"), "0.6 0.2 0.2");
    EXPECT_EQ(out.manifest.config.at("seed"), "11");
    EXPECT_EQ(out.manifest.sources.at("ratios"), "config");

    auto dev = inv(dir / "runs", "synth", {}, "dev");
    dev.env = [](const std::string& n) -> std::optional<std::string> {
        if (n == "MOBILEAGE_DEVICE") return "cuda";
        return std::nullopt;
    };
    EXPECT_THROW(execute(dev), ConfigError);

    // data root anchors relative image paths
    auto prep = inv(dir / "runs", "prepare", {{"images", "images"}});
    prep.env = [&](const std::string& n) -> std::optional<std::string> {
        if (n == "MOBILEAGE_DATA_ROOT") return (p.runs / "synth").string();
        return std::nullopt;
    };
    EXPECT_EQ(execute(prep).summary.at("kept"), 240);
}

TEST(Commands, MissingInputsNameTheirProducer)
{
    const auto runs = fixtures::scratch("cli_missing");
    auto message = [&](const std::string& cmd, Settings flags) {
        try {
            execute(inv(runs, cmd, std::move(flags), cmd + std::to_string(runs.string().size())));
        } catch (const Error& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_NE(message("train", {}).find("init-backbone"), std::string::npos);
    EXPECT_NE(message("evaluate", {{"checkpoint", (runs / "x.ckpt").string()}}).find("mobileage train"), std::string::npos);
    EXPECT_NE(message("bench", {{"artifact", (runs / "m.mafb").string()}}).find("mobileage export"), std::string::npos);
    EXPECT_NE(message("split", {}).find("mobileage prepare"), std::string::npos);
}

TEST(Commands, EndToEndTinyPipelineAndReport)
{
    const auto& p = prepared();
    const auto runs = p.runs;
    const Settings data{{"samples", p.samples}, {"split", p.split}};
    auto with = [&](Settings extra) {
        extra.insert(data.begin(), data.end());
        return extra;
    };
    const auto train = execute(inv(runs, "train",
                                   with({{"backbone_weights", p.weights},
                                         {"model.backbone", "tiny"},
                                         {"train.epochs", "2"},
                                         {"train.freeze_epochs", "1"},
                                         {"train.batch_size", "32"}})));
    EXPECT_EQ(train.summary.at("test_reads"), 0);
    const auto ckpt = (train.layout.checkpoints() / "best.ckpt").string();
    EXPECT_EQ(train.manifest.artifacts.at("checkpoints/best.ckpt"), sha256_file(ckpt));

    const auto ev = execute(inv(runs, "evaluate", with({{"checkpoint", ckpt}})));
    EXPECT_EQ(ev.summary.at("split"), "test");
    EXPECT_TRUE(std::filesystem::exists(ev.layout.reports() / "eval_test.json"));
    EXPECT_TRUE(std::filesystem::exists(ev.layout.reports() / "eval_test_histogram.tsv"));

    const auto ex = execute(inv(runs, "export", {{"checkpoint", ckpt}}));
    const auto par = execute(inv(runs, "parity",
                                 with({{"portable", ex.summary.at("portable").get<std::string>()},
                                       {"deployment", ex.summary.at("deployment").get<std::string>()},
                                       {"train_log", (train.layout.logs() / "epochs.jsonl").string()}})));
    EXPECT_LE(par.summary.at("max_abs_output_gap").get<double>(), 0.05);
    EXPECT_EQ(par.summary.at("best_train_val_mae").get<double>(), train.summary.at("best_val_mae").get<double>());

    for (const auto& art : {ex.summary.at("deployment").get<std::string>(), ex.summary.at("portable").get<std::string>(), ckpt}) {
        auto i = inv(runs, "bench", {{"artifact", art}, {"runs", "3"}, {"warmup", "1"}});
        i.overwrite = true;
        const auto b = execute(i);
        EXPECT_EQ(b.summary.at("bench").at("runs"), 3);
    }

    const auto rep = execute(inv(runs, "report"));
    for (const auto* k : {"mae", "delta_conv", "delta_val", "avg_ms", "params", "mult_adds"})
        EXPECT_FALSE(rep.summary.at(k).is_null()) << k;
    EXPECT_EQ(rep.summary.at("mae"), ev.summary.at("mae"));
    EXPECT_EQ(rep.summary.at("params"), ex.summary.at("params"));
    const auto md = slurp(rep.layout.reports() / "summary.md");
    for (const auto* h : {"## Training runs", "## Complexity", "## Conversion consistency", "## Latency"})
        EXPECT_NE(md.find(h), std::string::npos) << h;
}

TEST(Binary, ExitCodes)
{
    const auto runs = fixtures::scratch("cli_exit").string();
    EXPECT_EQ(run_binary("--help"), 0);
    EXPECT_EQ(run_binary("no-such-command"), 1);
    EXPECT_EQ(run_binary("train --runs-dir " + runs + " --lr banana"), 2);
    EXPECT_EQ(run_binary("evaluate --runs-dir " + runs + " --checkpoint " + runs + "/none.ckpt"), 3);
    EXPECT_EQ(run_binary("synth --runs-dir " + runs + " --count 4 --size 32"), 0);
    EXPECT_EQ(run_binary("synth --runs-dir " + runs + " --count 4 --size 32"), 2);
    EXPECT_EQ(run_binary("synth --runs-dir " + runs + " --count 4 --size 32 --overwrite"), 0);
}

TEST(Commands, SearchThenFinalizeLocksOnce)
{
    const auto& p = prepared();
    const auto runs = fixtures::scratch("cli_hpo");
    const Settings common{{"samples", p.samples},
                          {"split", p.split},
                          {"backbone_weights", p.weights},
                          {"model.backbone", "tiny"},
                          {"train.freeze_epochs", "1"}};
    auto flags = common;
    flags.insert({{"hpo.budget", "2"}, {"hpo.epoch_cap", "2"}, {"hpo.batch_sizes", "32"}});
    const auto s = execute(inv(runs, "hpo-search", flags, "study"));
    EXPECT_EQ(s.summary.at("test_reads_at_selection"), 0);
    const auto study = hpo::load_study(runs / "study" / "study.json");
    EXPECT_EQ(study.trials.size(), 2U);

    flags = common;
    flags.insert({{"study", (runs / "study" / "study.json").string()}, {"final_epochs", "2"}});
    const auto f = execute(inv(runs, "hpo-finalize", flags, "final"));
    EXPECT_EQ(f.summary.at("source_trial_id"), study.best_trial_id);
    EXPECT_FALSE(f.summary.at("test_evaluated_before_selection").get<bool>());

    // the plain-text lock reproduces the locked settings through train
    const auto cfg = load_config_file(runs / "final" / "locked.cfg");
    const auto locked = hpo::load_locked(runs / "final" / "locked.json");
    Layers l;
    l.config = cfg;
    const auto res = resolve(command_info("train").settings, l);
    EXPECT_EQ(cli::detail::train_spec(res.config), locked.train);
    EXPECT_EQ(cli::detail::model_spec(res.config), locked.model);

    // a second locked run from the same study needs force and a fresh id
    EXPECT_THROW(execute(inv(runs, "hpo-finalize", flags, "final2")), ConfigError);
}
