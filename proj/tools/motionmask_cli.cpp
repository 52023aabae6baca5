#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "motionmask/errors.hpp"
#include "motionmask/pipeline.hpp"
#include "motionmask/workspace.hpp"

using namespace motionmask;

namespace {

struct Options {
    std::string config_path;
    std::string profile = "toy";
    std::vector<std::string> overrides;
    std::string work = "work";
    std::string out;
    std::string strategy;
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    std::string features;
    std::string seed_frames;
    std::size_t frames = 0;
    std::vector<std::string> compare;
    std::size_t sample = 0;
};

PipelineConfig resolve(const Options& o, const CLI::App& app) {
    PipelineConfig c = profile_config(o.profile);
    if (!o.config_path.empty()) {
        c = load_config(o.config_path, c);
    }
    for (const std::string& record : o.overrides) {
        const auto eq = record.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + record + "'");
        }
        c.set(record.substr(0, eq), record.substr(eq + 1));
    }
    if (app.count("--seed") > 0) {
        c.seed = o.seed;
    }
    if (!o.strategy.empty()) {
        c.strategy = strategy_from_name(o.strategy);
    }
    if (app.count("--steps") > 0) {
        c.steps = o.steps;
    }
    c.validate();
    spdlog::info("resolved config:\n{}", c.to_text());
    return c;
}

int run(const std::string& command, const Options& o, const CLI::App& app) {
    const PipelineConfig config = resolve(o, app);
    const Workspace work{o.work};
    if (command == "gen-data") {
        run_gen_data(config, work);
    } else if (command == "train-rvq") {
        run_train_rvq(config, work);
    } else if (command == "train-mam") {
        run_train_mam(config, work);
    } else if (command == "train-mask") {
        run_train_mask(config, work);
    } else if (command == "infer") {
        if (o.out.empty()) {
            throw ConfigError("infer: --out is required");
        }
        const MotionSequence m = run_infer(config, work, InferRequest{o.features, o.seed_frames, o.frames, o.out});
        spdlog::info("infer: wrote {} frames to {}", m.frames.rows(), o.out);
    } else if (command == "eval") {
        std::vector<MaskStrategy> strategies;
        for (const std::string& name : o.compare) {
            strategies.push_back(strategy_from_name(name));
        }
        if (strategies.empty()) {
            strategies.push_back(config.strategy);
        }
        const std::vector<Evaluation> evals = run_eval(config, work, strategies, o.out);
        if (evals.size() == 1) {
            std::fputs(evals[0].report.to_table().c_str(), stdout);
        } else {
            std::fputs(ablation_table(evals).c_str(), stdout);
        }
    } else if (command == "export-attn") {
        if (o.out.empty()) {
            throw ConfigError("export-attn: --out is required");
        }
        run_export_attention(config, work, o.sample, o.out);
        spdlog::info("export-attn: wrote attention maps for eval sample {} to {}", o.sample, o.out);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Speech-driven gesture generation with semantic-aware masking"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("--config", o.config_path, "key=value config file")->check(CLI::ExistingFile);
    app.add_option("--profile", o.profile, "base profile")->check(CLI::IsMember({"toy", "paper"}));
    app.add_option("--seed", o.seed, "run seed");
    app.add_option("--strategy", o.strategy, "masking strategy")
        ->check(CLI::IsMember({"attention", "random", "loss"}));
    app.add_option("--steps", o.steps, "decoding steps at inference");
    app.add_option("--set", o.overrides, "extra key=value override (repeatable)");
    app.add_option("--work", o.work, "work directory holding corpus and checkpoints");
    app.add_option("--out", o.out, "output path");

    app.add_subcommand("gen-data", "write train and eval corpora");
    app.add_subcommand("train-rvq", "train the motion tokenizer");
    app.add_subcommand("train-mam", "train the motion-audio alignment model");
    app.add_subcommand("train-mask", "train the masked transformer for --strategy");
    CLI::App* infer = app.add_subcommand("infer", "generate motion from speech features and four seed frames");
    infer->add_option("--features", o.features, "features file (frames x channels)")->required();
    infer->add_option("--seed-frames", o.seed_frames, "seed motion file (4 x channels)")->required();
    infer->add_option("--frames", o.frames, "output length (default: one per feature row)");
    CLI::App* eval = app.add_subcommand("eval", "evaluate on the eval split");
    eval->add_option("--compare", o.compare, "strategies to compare as an ablation table")
        ->delimiter(',')
        ->check(CLI::IsMember({"attention", "random", "loss"}));
    CLI::App* attn = app.add_subcommand("export-attn", "export teacher attention maps as CSV");
    attn->add_option("--sample", o.sample, "eval sample index");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        set_log_level_from_env("info");
        return run(app.get_subcommands().front()->get_name(), o, app);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
    }
    return 1;
}
