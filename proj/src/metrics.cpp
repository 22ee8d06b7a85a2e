// SPDX-License-Identifier: Apache-2.0
#include "moelab/metrics.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>

namespace moelab {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

MetricsCsv::MetricsCsv(const std::filesystem::path& path, int num_domains)
    : out_(path, std::ios::trunc), num_domains_(num_domains) {
  if (!out_) throw MissingInputError("cannot open metrics file: " + path.string());
  out_ << "step,phase,total_loss,task_loss,kd_loss,lambda,trainable_fraction,mean_overlap,"
          "acc_general";
  for (int d = 0; d < num_domains_; ++d) out_ << ",acc_d" << d;
  out_ << "\n";
}

void MetricsCsv::append(const MetricsRecord& r) {
  out_ << r.step << ',' << r.phase << ',' << fmt_g(r.total_loss) << ',' << fmt_g(r.task_loss)
       << ',' << fmt_g(r.kd_loss) << ',' << fmt_g(r.lambda) << ','
       << fmt_g(r.trainable_fraction) << ',' << fmt_g(r.mean_overlap) << ','
       << fmt_g(r.acc_general);
  for (int d = 0; d < num_domains_; ++d)
    out_ << ',' << fmt_g(d < static_cast<int>(r.acc_domain.size()) ? r.acc_domain[size_t(d)]
                                                                   : 0.0);
  out_ << "\n";
  out_.flush();
}

EventLog::EventLog(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
  if (!out_) throw MissingInputError("cannot open event log: " + path.string());
}

void EventLog::log(long long step, const std::string& event, const std::string& detail) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char ts[32];
  std::strftime(ts, sizeof(ts), "%Y-%m-%dT%H:%M:%S", std::gmtime(&tt));
  out_ << "ts=" << ts << " step=" << step << " event=" << event;
  if (!detail.empty()) out_ << ' ' << detail;
  out_ << "\n";
  out_.flush();
}

AffinityCsv::AffinityCsv(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
  if (!out_) throw MissingInputError("cannot open affinity file: " + path.string());
  out_ << "step,layer,domain,expert,affinity,affinity_smoothed,mask\n";
}

void AffinityCsv::append(long long step, int layer, int domain, int expert, double raw,
                         double smoothed, int mask_bit) {
  out_ << step << ',' << layer << ',' << domain << ',' << expert << ',' << fmt_g(raw) << ','
       << fmt_g(smoothed) << ',' << mask_bit << "\n";
}

ForgettingReport forgetting_report(const std::vector<double>& before,
                                   const std::vector<double>& after) {
  if (before.size() != after.size() || before.empty())
    throw ArgumentError("forgetting_report: suite mismatch");
  ForgettingReport rep;
  double sum = 0.0;
  for (size_t i = 0; i < before.size(); ++i) {
    rep.deltas.push_back(after[i] - before[i]);
    sum += before[i] > 0.0 ? after[i] / before[i] : 1.0;  // nothing to forget
  }
  rep.retention = sum / double(before.size());
  return rep;
}

uint64_t fnv1a_hash(const std::string& text) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace moelab
