// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "moelab/common.hpp"

namespace moelab {

std::string fmt_g(double v);  // stable %.9g formatting for CSV output

struct MetricsRecord {
  long long step = 0;
  std::string phase;
  double total_loss = 0.0;
  double task_loss = 0.0;
  double kd_loss = 0.0;
  double lambda = 0.0;
  double trainable_fraction = 0.0;
  double mean_overlap = 0.0;
  double acc_general = 0.0;
  std::vector<double> acc_domain;
};

// Append-only CSV, one row per record. Column layout is fixed by the domain
// count at open time.
class MetricsCsv {
public:
  MetricsCsv() = default;
  MetricsCsv(const std::filesystem::path& path, int num_domains);
  void append(const MetricsRecord& r);

private:
  std::ofstream out_;
  int num_domains_ = 0;
};

// Timestamps live only here; every other artifact is byte-stable for a
// fixed config and seed.
class EventLog {
public:
  EventLog() = default;
  explicit EventLog(const std::filesystem::path& path);
  void log(long long step, const std::string& event, const std::string& detail);

private:
  std::ofstream out_;
};

// Per-refresh affinity snapshot rows: step, layer, domain, expert, raw A,
// smoothed A, mask bit.
class AffinityCsv {
public:
  AffinityCsv() = default;
  explicit AffinityCsv(const std::filesystem::path& path);
  void append(long long step, int layer, int domain, int expert, double raw, double smoothed,
              int mask_bit);

private:
  std::ofstream out_;
};

struct ForgettingReport {
  std::vector<double> deltas;  // after - before, per suite
  double retention = 0.0;      // mean of after/before ratios
};

// Both sides must cover the same suites, in the same order.
ForgettingReport forgetting_report(const std::vector<double>& before,
                                   const std::vector<double>& after);

uint64_t fnv1a_hash(const std::string& text);

}  // namespace moelab
