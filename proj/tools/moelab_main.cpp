// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner. Exit codes: 0 success, 1 config/usage error, 2 missing
// input, 3 numeric failure.
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "moelab/experiment.hpp"

using namespace moelab;

int main(int argc, char** argv) {
  CLI::App app{"moelab: desk-scale mixture-of-experts fine-tuning laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string policy_name = "des-moe";
  std::string checkpoint_path;
  std::string report_dir;
  std::string report_out;
  int n_min = 2, n_max = 6;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
  };

  CLI::App* pretrain = app.add_subcommand("pretrain", "train the base model on the full mixture");
  add_config(pretrain);

  CLI::App* finetune = app.add_subcommand("finetune", "fine-tune from the pretrained checkpoint");
  add_config(finetune);
  finetune->add_option("--policy", policy_name, "des-moe | fft | static-esft")
      ->check(CLI::IsMember({"des-moe", "fft", "static-esft"}));

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the frozen suites");
  add_config(eval);
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint to evaluate");

  CLI::App* sweep = app.add_subcommand("sweep", "retention vs number of fine-tuned domains");
  add_config(sweep);
  sweep->add_option("--n-min", n_min, "smallest domain count");
  sweep->add_option("--n-max", n_max, "largest domain count");

  CLI::App* report = app.add_subcommand("report", "aggregate metrics into summary + plots");
  report->add_option("-d,--dir", report_dir, "directory holding run artifacts")->required();
  report->add_option("-o,--out", report_out, "output directory (default: <dir>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (pretrain->parsed()) {
      auto out = run_pretrain(ExperimentConfig::load(config_path));
      std::cout << "pretrain done: " << out.checkpoint.string()
                << " general=" << out.final_eval.general << "\n";
    } else if (finetune->parsed()) {
      auto cfg = ExperimentConfig::load(config_path);
      auto out = run_finetune(cfg, parse_policy(policy_name));
      std::cout << "finetune done: " << out.run_dir.string()
                << " retention=" << out.retention_general << "\n";
    } else if (eval->parsed()) {
      auto cfg = ExperimentConfig::load(config_path);
      auto ckpt = checkpoint_path.empty() ? pretrain_checkpoint_path(cfg)
                                          : std::filesystem::path(checkpoint_path);
      std::cout << run_eval(cfg, ckpt).dump(2) << "\n";
    } else if (sweep->parsed()) {
      auto rows = run_sweep(ExperimentConfig::load(config_path), n_min, n_max);
      std::cout << "sweep done: " << rows.size() << " rows\n";
    } else if (report->parsed()) {
      std::filesystem::path dir(report_dir);
      std::filesystem::path out = report_out.empty() ? dir / "report"
                                                     : std::filesystem::path(report_out);
      run_report(dir, out);
      std::cout << "report written to " << out.string() << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const ArgumentError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const MissingInputError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
