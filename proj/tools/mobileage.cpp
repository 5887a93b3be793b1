// mobileage: command-line front end over mobileage::cli.
//
// Exit codes: 0 ok, 1 usage, 2 configuration, 3 data, 4 numerical.

#include <CLI11.hpp>

#include "mobileage/cli.hpp"

namespace {

using mobileage::cli::Kind;

struct Bound {
    const mobileage::cli::SettingDef* def;
    CLI::Option* opt;
    std::vector<std::string> values;
};

struct Sub {
    std::string command;
    CLI::App* app;
    std::vector<std::unique_ptr<Bound>> options;
};

std::string join(const std::vector<std::string>& v)
{
    std::string out;
    for (const auto& s : v) out += (out.empty() ? "" : " ") + s;
    return out;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"On-device age estimation pipeline: data, training, search, export, parity, latency."};
    app.require_subcommand(1);
    app.set_version_flag("--version", mobileage::cli::kToolVersion);

    mobileage::cli::Invocation inv;
    std::string runs_dir = "runs", config_file, from_manifest;
    std::vector<Sub> subs;
    subs.reserve(mobileage::cli::commands().size());

    for (const auto& info : mobileage::cli::commands()) {
        Sub s{info.name, app.add_subcommand(info.name, info.help), {}};
        s.app->add_option("--run-id", inv.run_id, "run directory name (default: the command name)");
        s.app->add_option("--runs-dir", runs_dir, "parent of all run directories")->capture_default_str();
        s.app->add_flag("--overwrite", inv.overwrite, "replace an existing run directory");
        s.app->add_option("--config", config_file, "`key = value` settings file");
        s.app->add_option("--from-manifest", from_manifest, "replay the settings recorded in a run manifest");

        // a short alias (--lr for --train.lr) when the last component is unambiguous
        std::map<std::string, int> tails;
        for (const auto& d : info.settings) ++tails[d.key.substr(d.key.rfind('.') + 1)];

        for (const auto& d : info.settings) {
            auto b = std::make_unique<Bound>();
            b->def = &d;
            std::string names = "--" + d.key;
            const auto tail = d.key.substr(d.key.rfind('.') + 1);
            if (tail != d.key && tails[tail] == 1) names += ",--" + tail;
            auto help = d.help + " [default: " + (d.def.empty() ? "none" : d.def) + "]";
            if (!d.env.empty()) help += " (env " + d.env + ")";
            b->opt = s.app->add_option(names, b->values, help);
            switch (d.kind) {
            case Kind::Bool: b->opt->expected(0, 1); break;
            case Kind::Triple: b->opt->expected(1, 3); break;
            case Kind::List: b->opt->expected(1, 32); break;
            default: b->opt->expected(1); break;
            }
            s.options.push_back(std::move(b));
        }
        subs.push_back(std::move(s));
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    for (auto& s : subs) {
        if (!s.app->parsed()) continue;
        inv.command = s.command;
        for (const auto& b : s.options) {
            if (b->opt->count() == 0) continue;
            inv.flags[b->def->key] = b->values.empty() ? "true" : join(b->values);
        }
    }
    inv.runs_dir = runs_dir;
    inv.config_file = config_file;
    inv.from_manifest = from_manifest;

    try {
        const auto out = mobileage::cli::execute(inv);
        std::cerr << "run " << out.manifest.run_id << " -> " << out.layout.root.string() << '\n';
        std::cout << out.summary.dump(2) << '\n';
        return 0;
    } catch (const mobileage::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
