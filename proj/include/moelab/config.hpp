// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/datagen.hpp"
#include "moelab/trainer.hpp"

namespace moelab {

// Experiment description loaded from JSON. Unknown keys are rejected at
// every level so typos cannot silently fall back to defaults.
struct ExperimentConfig {
  std::string name = "experiment";
  std::string output_dir = "runs/experiment";
  uint64_t seed = 1;
  Precision precision = Precision::F32;
  ModelConfig model;
  std::vector<DomainSpec> domains;
  DomainSpec general;
  TrainConfig pretrain;
  TrainConfig finetune;

  static ExperimentConfig load(const std::filesystem::path& path);
  static ExperimentConfig from_json(const nlohmann::json& j);

  // canonical echo; hashing this ties artifacts to their configuration
  nlohmann::ordered_json echo() const;
  std::string echo_text() const { return echo().dump(2) + "\n"; }

  void validate() const;
};

}  // namespace moelab
