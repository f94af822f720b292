#include <CLI11.hpp>

#include <iostream>

#include "ntklab/cli.hpp"

using namespace ntklab;

int main(int argc, char** argv) {
    CLI::App app{"ntklab: NTK-regime training, dataset reconstruction and distillation"};
    app.require_subcommand(1);

    std::string config_path, profile = "desk", out_override;
    std::optional<std::uint64_t> seed_override;
    bool resume = false, deterministic = true;
    app.add_option("--config", config_path, "JSON experiment config");
    app.add_option("--profile", profile, "preset: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--seed", seed_override, "override the base seeds");
    app.add_option("--out", out_override, "override the output directory");
    app.add_flag("--resume", resume, "skip stages already recorded in the manifest");
    app.add_flag("--deterministic,!--no-deterministic", deterministic,
                 "deterministic reductions (default on)");

    auto* c_train = app.add_subcommand("train", "train a network and write a checkpoint");
    auto* c_attack = app.add_subcommand("attack", "reconstruct training data from a checkpoint");
    auto* c_sweep = app.add_subcommand("sweep", "width/size/dynamics grid with kernel distances");
    auto* c_onion = app.add_subcommand("onion", "iterative reconstruct-and-prune loop");
    auto* c_distill = app.add_subcommand("distill", "build distilled sets (kip/rkip/rkip-finite)");
    auto* c_retrain = app.add_subcommand("retrain", "evaluate distilled sets, emit the table");
    auto* c_report = app.add_subcommand("report", "summarize result files in the output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg;
        if (!config_path.empty())
            cfg = load_config_file(config_path, profile);
        else
            apply_profile(cfg, profile);
        if (seed_override) {
            cfg.task.seed = *seed_override;
            cfg.train.seed = *seed_override + 1;
            cfg.attack.seed = *seed_override + 2;
            cfg.distill.seed = *seed_override + 3;
        }
        if (!out_override.empty()) cfg.out_dir = out_override;
        cfg.deterministic = deterministic;

        if (c_train->parsed()) cmd_train(cfg, resume);
        if (c_attack->parsed()) cmd_attack(cfg, resume);
        if (c_sweep->parsed()) cmd_sweep(cfg, resume);
        if (c_onion->parsed()) cmd_onion(cfg, resume);
        if (c_distill->parsed()) cmd_distill(cfg, resume);
        if (c_retrain->parsed()) cmd_retrain(cfg, resume);
        if (c_report->parsed()) cmd_report(cfg);
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
