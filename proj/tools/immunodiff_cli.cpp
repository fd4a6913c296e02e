#include <CLI11.hpp>

#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "immunodiff/pipeline/stages.hpp"

using namespace immunodiff;
using namespace immunodiff::pipeline;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    std::optional<std::size_t> steps;
    std::optional<double> lr;
    std::optional<double> lambda;
    std::optional<double> tau;
};

// --steps / --lr land on the stage the subcommand runs.
void apply_overrides(RunConfig& c, const Flags& f, const std::string& cmd) {
    if (f.seed) c.seed = *f.seed;
    if (f.lambda) c.adapter.lambda = *f.lambda;
    if (f.tau) c.vl.tau = *f.tau;
    auto stage = [&](StageConfig& s) {
        if (f.steps) s.steps = *f.steps;
        if (f.lr) s.lr = *f.lr;
    };
    if (cmd == "pretrain-vl") {
        if (f.steps) c.vl_epochs = *f.steps;
        if (f.lr) c.vl_lr = *f.lr;
    } else if (cmd == "train-ddpm") {
        stage(c.ddpm);
    } else if (cmd == "train-control") {
        stage(c.control);
    } else if (cmd == "train-cbi") {
        stage(c.cbi);
    } else if (cmd == "predict") {
        if (f.steps) c.head_epochs = *f.steps;
        if (f.lr) c.head_lr = *f.lr;
    } else if (f.steps || f.lr) {
        throw ConfigError("--steps/--lr have no effect on '" + cmd + "'");
    }
    c.validate();
}

void print_loss(const std::string& stage, const StageLoss& l) {
    std::printf("%s: loss %s -> %s (drop %.1f%%)\n", stage.c_str(), fmt(l.initial).c_str(), fmt(l.final).c_str(),
                100.0 * l.drop());
}

int run(const std::string& cmd, const Flags& f) {
    RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
    apply_overrides(c, f, cmd);
    const RunContext ctx{c, f.out};
    if (cmd == "gen-data") {
        const auto ds = run_gen_data(ctx);
        std::size_t resp = 0;
        for (const auto& cs : ds.cases) resp += cs.responder;
        std::printf("gen-data: %zu cases (%zu responders) in %s\n", ds.cases.size(), resp,
                    ctx.dataset_dir().string().c_str());
    } else if (cmd == "pretrain-vl") {
        print_loss(cmd, run_pretrain_vl(ctx));
    } else if (cmd == "train-ddpm") {
        print_loss(cmd, run_train_ddpm(ctx));
    } else if (cmd == "train-control") {
        print_loss(cmd, run_train_control(ctx));
    } else if (cmd == "train-cbi") {
        print_loss(cmd, run_train_cbi(ctx));
    } else if (cmd == "predict") {
        const auto r = run_predict(ctx);
        std::printf("predict: %zu predictions in %s\n", r.predictions.size(), ctx.predictions().string().c_str());
    } else if (cmd == "generate") {
        const auto split = load_split(ctx);
        const auto g = run_generate(ctx, split);
        std::printf("generate: %zu images in %s\n", g.size(), ctx.generated_dir().string().c_str());
    } else if (cmd == "evaluate") {
        const auto rep = run_evaluate(ctx);
        for (const char* k : {"balanced_accuracy.mean", "balanced_accuracy.std", "c_index.mean", "c_index.std",
                              "holdout.balanced_accuracy", "holdout.c_index", "generation.mmd", "generation.ssim"})
            std::printf("%s=%s\n", k, rep.find(k)->c_str());
        std::printf("report: %s\n", ctx.report().string().c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"immunodiff: two-stage conditional diffusion pipeline on synthetic phantoms"};
    app.require_subcommand(1, 1);
    Flags f;
    const std::map<std::string, std::string> commands{
        {"gen-data", "generate and persist the phantom dataset"},
        {"pretrain-vl", "contrastive vessel/lobe encoder pretraining"},
        {"train-ddpm", "train the base denoiser"},
        {"train-control", "train the anatomy control branch (base locked)"},
        {"train-cbi", "train the clinical adapter and branch"},
        {"generate", "sample post-treatment images"},
        {"predict", "extract features and fit response/survival heads per fold"},
        {"evaluate", "per-fold metrics, generation metrics and report"},
    };
    std::string chosen;
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", f.config, "JSON config file (defaults apply to missing keys)");
        sub->add_option("--seed", f.seed, "run seed");
        sub->add_option("--out", f.out, "output directory")->capture_default_str();
        sub->add_option("--steps", f.steps, "training steps (epochs for pretrain-vl and predict)");
        sub->add_option("--lr", f.lr, "learning rate for this stage");
        sub->add_option("--lambda", f.lambda, "fusion weight for the clinical embeddings");
        sub->add_option("--tau", f.tau, "contrastive temperature");
        sub->callback([&chosen, name = name] { chosen = name; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << " (see --help)\n";
        return 2;
    }
    try {
        return run(chosen, f);
    } catch (const DependencyError& e) {
        std::cerr << chosen << ": dependency error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << chosen << ": config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << chosen << ": error: " << e.what() << "\n";
        return 1;
    }
}
