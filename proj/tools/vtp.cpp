// SPDX-License-Identifier: Apache-2.0
//
// vtp: visual-token-pruning pipeline driver.
//
// Subcommands run the pipeline stages in order:
//   gen -> extract -> train -> search -> eval -> report
//
// Every stage reads one declarative JSON config (--config) and refuses to mix
// artifacts produced under a different configuration. Exit codes: 0 success,
// 2 configuration error, 3 missing or mismatched artifact, 1 anything else.

#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "vtp/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitArtifact = 3;

int run_stage(const std::string& stage, const std::string& config_path) {
    try {
        const vtp::RunConfig cfg = vtp::load_run_config(config_path);
        if (stage == "gen") {
            vtp::cmd_gen(cfg);
        } else if (stage == "extract") {
            vtp::cmd_extract(cfg);
        } else if (stage == "train") {
            vtp::cmd_train(cfg);
        } else if (stage == "search") {
            vtp::cmd_search(cfg);
        } else if (stage == "eval") {
            vtp::cmd_eval(cfg);
        } else {
            vtp::cmd_report(cfg);
        }
        return 0;
    } catch (const vtp::ConfigError& e) {
        std::cerr << "vtp " << stage << ": config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const vtp::MissingArtifactError& e) {
        std::cerr << "vtp " << stage << ": missing artifact: " << e.what() << "\n";
        return kExitArtifact;
    } catch (const std::exception& e) {
        std::cerr << "vtp " << stage << ": error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"visual-token-pruning pipeline"};
    app.require_subcommand(1);

    const struct {
        const char* name;
        const char* help;
    } stages[] = {
        {"gen", "generate the synthetic scene dataset (train/val/test JSONL)"},
        {"extract", "distill teacher attention into oracle importance maps"},
        {"train", "fit the importance predictor and write a checkpoint"},
        {"search", "calibrate pruning thresholds per budget on the validation split"},
        {"eval", "score all pruning arms on the test split"},
        {"report", "flatten eval results into a CSV report"},
    };

    std::string config_path;
    std::string chosen;
    for (const auto& stage : stages) {
        CLI::App* sub = app.add_subcommand(stage.name, stage.help);
        sub->add_option("--config", config_path, "path to the run configuration JSON")
            ->required();
        sub->callback([&chosen, name = std::string(stage.name)] { chosen = name; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        // CLI11 reserves its own exit codes; fold usage errors into the
        // config-error code and keep 0 for --help.
        return rc == 0 ? 0 : kExitConfig;
    }
    return run_stage(chosen, config_path);
}
