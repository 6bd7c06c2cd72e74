#include "linevit/cli.hpp"
#include "linevit/version.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace linevit;

namespace {

struct CommonFlags {
    std::string config_file;
    std::vector<std::string> sets;
    std::string seed, variant, n, out, checkpoint, epochs, threads;
};

void add_common(CLI::App* app, CommonFlags& f) {
    app->add_option("--config", f.config_file, "configuration file (key = value lines)");
    app->add_option("--set", f.sets, "override any config key, e.g. --set train.lr=1e-3");
    app->add_option("--seed", f.seed, "base RNG seed (gen.seed and train.seed)");
    app->add_option("--variant", f.variant, "dataset variant")
        ->check(CLI::IsMember({"I", "II", "III", "IV", "1", "2", "3", "4"}));
    app->add_option("--n", f.n, "number of images to generate (gen.n_images)");
    app->add_option("--out", f.out, "output directory for this command");
    app->add_option("--checkpoint", f.checkpoint, "checkpoint path (eval) or resume point (train)");
    app->add_option("--epochs", f.epochs, "training epoch budget (train.max_epochs)");
    app->add_option("--device-threads", f.threads, "worker threads for forward/backward");
}

// flag > config file > built-in default
Config resolve(const CommonFlags& f, const std::string& cmd) {
    Config cfg;
    if (!f.config_file.empty()) cfg.merge_file(f.config_file);
    for (const auto& kv : f.sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!f.seed.empty()) {
        cfg.set("gen.seed", f.seed);
        cfg.set("train.seed", f.seed);
    }
    if (!f.variant.empty()) cfg.set("gen.variant", f.variant);
    if (!f.n.empty()) cfg.set("gen.n_images", f.n);
    if (!f.epochs.empty()) cfg.set("train.max_epochs", f.epochs);
    if (!f.threads.empty()) cfg.set("train.threads", f.threads);
    if (!f.checkpoint.empty()) {
        cfg.set(cmd == "train" ? "train.resume" : "eval.checkpoint", f.checkpoint);
    }
    if (!f.out.empty()) {
        if (cmd == "gen") cfg.set("gen.out", f.out);
        else if (cmd == "train") cfg.set("train.out", f.out);
        else if (cmd == "eval") cfg.set("eval.out", f.out);
        else if (cmd == "analyze") cfg.set("analyze.out", f.out);
        else if (cmd == "report") cfg.set("report.out", f.out);
        else cfg.set("run.out", f.out);
    }
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{std::string(kToolName) + " " + kVersion +
                 " - synthetic line-image pipeline: generate, train, evaluate, analyze, report"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* desc;
        int (*fn)(const Config&);
    };
    const Sub subs[] = {
        {"gen", "generate a synthetic line dataset with manifest", cli::cmd_gen},
        {"train", "fine-tune the model on a generated dataset", cli::cmd_train},
        {"eval", "write predictions for the held-out split", cli::cmd_eval},
        {"analyze", "compute error statistics from predictions", cli::cmd_analyze},
        {"report", "render SVG figures from statistics", cli::cmd_report},
        {"all", "run gen, train, eval, analyze, report with one config", cli::cmd_all},
    };

    std::vector<CommonFlags> flags(std::size(subs));
    for (std::size_t i = 0; i < std::size(subs); ++i) {
        CLI::App* sub = app.add_subcommand(subs[i].name, subs[i].desc);
        add_common(sub, flags[i]);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2; // usage problems exit 2
    }

    for (std::size_t i = 0; i < std::size(subs); ++i) {
        if (!app.get_subcommand(subs[i].name)->parsed()) continue;
        try {
            Config cfg = resolve(flags[i], subs[i].name);
            return subs[i].fn(cfg);
        } catch (const ConfigError& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }
    return 2;
}
