#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "stpredict/experiment.hpp"

using namespace stpredict;

int main(int argc, char** argv) {
    CLI::App app{"Spatiotemporal CSI forecasting toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, labeled_dir, unlabeled_dir,
        checkpoint_path;
    bool adaptive = false;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic CSI dataset");
    gen->add_option("--config", config_path, "Experiment config (JSON)")->required();
    gen->add_option("--out", out_dir, "Dataset output directory")->required();

    auto* train = app.add_subcommand("train", "Supervised training");
    train->add_option("--config", config_path, "Experiment config (JSON)")->required();
    train->add_option("--data", data_dir, "Dataset directory")->required();
    train->add_option("--out", out_dir, "Run output directory")->required();

    auto* meta = app.add_subcommand("meta-train", "Meta pseudo-label training");
    meta->add_option("--config", config_path, "Experiment config (JSON)")->required();
    meta->add_option("--labeled", labeled_dir, "Labeled dataset directory")->required();
    meta->add_option("--unlabeled", unlabeled_dir, "Unlabeled dataset directory")
        ->required();
    meta->add_option("--out", out_dir, "Run output directory")->required();
    meta->add_flag("--adaptive", adaptive, "Use the similarity-weighted labeled loss");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    eval->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
    eval->add_option("--data", data_dir, "Dataset directory")->required();
    eval->add_option("--out", out_dir, "Report output directory");

    auto* ablate = app.add_subcommand("ablate", "Run the ablation grid");
    ablate->add_option("--config", config_path, "Experiment config (JSON)")->required();
    ablate->add_option("--out", out_dir, "Report output directory")->required();

    auto* params = app.add_subcommand("params", "Print parameter and FLOP counts");
    params->add_option("--config", config_path, "Experiment config (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_dir);
        if (train->parsed()) return cmd_train(config_path, data_dir, out_dir);
        if (meta->parsed()) {
            return cmd_meta_train(config_path, labeled_dir, unlabeled_dir, out_dir,
                                  adaptive);
        }
        if (eval->parsed()) return cmd_eval(checkpoint_path, data_dir, out_dir);
        if (ablate->parsed()) return cmd_ablate(config_path, out_dir);
        if (params->parsed()) return cmd_params(config_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const ShapeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
