// SPDX-License-Identifier: Apache-2.0
//
// Experiment drivers behind the CLI subcommands. Every run directory gets
// config-echo.json, metrics.csv, events.log and a checkpoint; sweep and
// report aggregate across runs.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/config.hpp"
#include "moelab/trainer.hpp"

namespace moelab {

inline constexpr const char* kOutputDirEnv = "MOELAB_OUTPUT_DIR";

std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg);
std::filesystem::path pretrain_checkpoint_path(const ExperimentConfig& cfg);

struct PretrainOutcome {
  std::filesystem::path run_dir;
  std::filesystem::path checkpoint;
  EvalResult final_eval;
};

struct FinetuneOutcome {
  std::filesystem::path run_dir;
  std::filesystem::path checkpoint;
  FinetuneResult result;
  double retention_general = 0.0;
};

struct SweepRow {
  int n_domains = 0;
  std::string policy;
  uint64_t seed = 0;
  double acc_general_before = 0.0;
  double acc_general_after = 0.0;
  double retention_general = 0.0;
};

PretrainOutcome run_pretrain(const ExperimentConfig& cfg);

// first_n < 0 fine-tunes on every configured domain; run_name defaults to
// "finetune-<policy>"
FinetuneOutcome run_finetune(const ExperimentConfig& cfg, Policy policy, int first_n = -1,
                             const std::string& run_name = "");

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, int n_min, int n_max);

nlohmann::ordered_json run_eval(const ExperimentConfig& cfg,
                                const std::filesystem::path& checkpoint);

// Aggregates sweep.csv and summary.json files found under metrics_dir;
// writes summary.json and a retention-vs-domains SVG into out_dir.
nlohmann::ordered_json run_report(const std::filesystem::path& metrics_dir,
                                  const std::filesystem::path& out_dir);

}  // namespace moelab
