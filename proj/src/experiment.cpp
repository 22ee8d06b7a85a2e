// SPDX-License-Identifier: Apache-2.0
#include "moelab/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "moelab/checkpoint.hpp"
#include "moelab/metrics.hpp"
#include "moelab/svgplot.hpp"

namespace moelab {

namespace fs = std::filesystem;

std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return fs::path(env);
  return fs::path(cfg.output_dir);
}

std::filesystem::path pretrain_checkpoint_path(const ExperimentConfig& cfg) {
  return resolve_output_dir(cfg) / "pretrain" / "checkpoint.bin";
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingInputError("cannot write " + path.string());
  f << text;
}

std::string config_hash_hex(const ExperimentConfig& cfg) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a_hash(cfg.echo_text())));
  return buf;
}

nlohmann::ordered_json eval_json(const EvalResult& ev) {
  nlohmann::ordered_json j;
  j["per_domain"] = ev.per_domain;
  j["general"] = ev.general;
  return j;
}

template <class S>
PretrainOutcome run_pretrain_impl(const ExperimentConfig& cfg) {
  PretrainOutcome out;
  out.run_dir = resolve_output_dir(cfg) / "pretrain";
  fs::create_directories(out.run_dir);
  write_text(out.run_dir / "config-echo.json", cfg.echo_text());

  // pretraining mixture: every task domain plus the general LM task
  auto domains = cfg.domains;
  domains.push_back(cfg.general);
  MoEModel<S> model = MoEModel<S>::build(cfg.model, mix64(cfg.seed, 0x707265ULL));

  MetricsCsv metrics(out.run_dir / "metrics.csv", static_cast<int>(domains.size()));
  EventLog events(out.run_dir / "events.log");
  Trainer<S> trainer(model, domains, cfg.general, cfg.pretrain, &metrics, &events, nullptr);
  FinetuneResult res = trainer.run();
  out.final_eval = res.after;

  out.checkpoint = out.run_dir / "checkpoint.bin";
  save_checkpoint(model, out.checkpoint);

  nlohmann::ordered_json summary;
  summary["name"] = cfg.name;
  summary["kind"] = "pretrain";
  summary["config_hash"] = config_hash_hex(cfg);
  summary["seed"] = cfg.seed;
  summary["steps"] = cfg.pretrain.steps;
  summary["final"] = eval_json(res.after);
  write_text(out.run_dir / "summary.json", summary.dump(2) + "\n");
  return out;
}

template <class S>
FinetuneOutcome run_finetune_impl(const ExperimentConfig& cfg, Policy policy, int first_n,
                                  const std::string& run_name) {
  const fs::path ckpt = pretrain_checkpoint_path(cfg);
  if (!fs::exists(ckpt))
    throw MissingInputError("pretrained checkpoint not found: " + ckpt.string() +
                            " (run the pretrain subcommand first)");
  FinetuneOutcome out;
  out.run_dir = resolve_output_dir(cfg) /
                (run_name.empty() ? "finetune-" + to_string(policy) : run_name);
  fs::create_directories(out.run_dir);
  write_text(out.run_dir / "config-echo.json", cfg.echo_text());

  std::vector<DomainSpec> domains = cfg.domains;
  if (first_n >= 0) {
    if (first_n < 1 || first_n > static_cast<int>(domains.size()))
      throw ArgumentError("finetune: domain count " + std::to_string(first_n) + " outside [1, " +
                          std::to_string(domains.size()) + "]");
    domains.resize(static_cast<size_t>(first_n));
  }

  MoEModel<S> model = load_checkpoint<S>(ckpt, cfg.model);
  TrainConfig tc = cfg.finetune;
  tc.policy = policy;

  MetricsCsv metrics(out.run_dir / "metrics.csv", static_cast<int>(domains.size()));
  EventLog events(out.run_dir / "events.log");
  AffinityCsv affinity(out.run_dir / "affinity.csv");
  Trainer<S> trainer(model, domains, cfg.general, tc, &metrics, &events, &affinity);
  out.result = trainer.run();
  out.retention_general =
      forgetting_report({out.result.before.general}, {out.result.after.general}).retention;

  out.checkpoint = out.run_dir / "checkpoint.bin";
  save_checkpoint(model, out.checkpoint);

  nlohmann::ordered_json summary;
  summary["name"] = cfg.name;
  summary["kind"] = "finetune";
  summary["policy"] = to_string(policy);
  summary["config_hash"] = config_hash_hex(cfg);
  summary["seed"] = cfg.seed;
  summary["steps"] = tc.steps;
  summary["n_domains"] = domains.size();
  summary["before"] = eval_json(out.result.before);
  summary["after"] = eval_json(out.result.after);
  summary["retention_general"] = out.retention_general;
  summary["duplications"] = out.result.duplications;
  summary["final_overlap"] = out.result.final_overlap;
  write_text(out.run_dir / "summary.json", summary.dump(2) + "\n");
  return out;
}

template <class S>
nlohmann::ordered_json run_eval_impl(const ExperimentConfig& cfg, const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw MissingInputError("checkpoint not found: " + ckpt.string());
  MoEModel<S> model = load_checkpoint<S>(ckpt, cfg.model);
  const bool adaptive = model.blocks().front().moe.adaptive.has_value();
  EvalSuite suite = build_eval_suite(cfg.domains, cfg.general, cfg.finetune.eval_samples);
  nlohmann::ordered_json j;
  j["checkpoint"] = ckpt.string();
  nlohmann::ordered_json per;
  for (size_t d = 0; d < suite.per_domain.size(); ++d)
    per[to_string(cfg.domains[d].kind)] = exact_match_eval(model, suite.per_domain[d], adaptive);
  j["per_domain"] = per;
  j["general"] = exact_match_eval(model, suite.general, adaptive);
  return j;
}

}  // namespace

PretrainOutcome run_pretrain(const ExperimentConfig& cfg) {
  return cfg.precision == Precision::F32 ? run_pretrain_impl<float>(cfg)
                                         : run_pretrain_impl<double>(cfg);
}

FinetuneOutcome run_finetune(const ExperimentConfig& cfg, Policy policy, int first_n,
                             const std::string& run_name) {
  return cfg.precision == Precision::F32
             ? run_finetune_impl<float>(cfg, policy, first_n, run_name)
             : run_finetune_impl<double>(cfg, policy, first_n, run_name);
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, int n_min, int n_max) {
  if (n_min < 1 || n_min > n_max) throw ArgumentError("sweep: need 1 <= n_min <= n_max");
  if (static_cast<int>(cfg.domains.size()) < n_max)
    throw ArgumentError("sweep: config has " + std::to_string(cfg.domains.size()) +
                        " domains, need at least " + std::to_string(n_max));
  const fs::path dir = resolve_output_dir(cfg) / "sweep";
  fs::create_directories(dir);
  std::vector<SweepRow> rows;
  for (int n = n_min; n <= n_max; ++n) {
    for (Policy policy : {Policy::DesMoe, Policy::Fft, Policy::StaticEsft}) {
      const std::string run_name =
          "sweep/n" + std::to_string(n) + "-" + to_string(policy);
      FinetuneOutcome res = run_finetune(cfg, policy, n, run_name);
      SweepRow row;
      row.n_domains = n;
      row.policy = to_string(policy);
      row.seed = cfg.seed;
      row.acc_general_before = res.result.before.general;
      row.acc_general_after = res.result.after.general;
      row.retention_general = res.retention_general;
      rows.push_back(row);
    }
  }
  std::ofstream csv(dir / "sweep.csv", std::ios::trunc);
  csv << "n_domains,policy,seed,acc_general_before,acc_general_after,retention_general\n";
  for (const auto& r : rows)
    csv << r.n_domains << ',' << r.policy << ',' << r.seed << ',' << fmt_g(r.acc_general_before)
        << ',' << fmt_g(r.acc_general_after) << ',' << fmt_g(r.retention_general) << "\n";
  return rows;
}

nlohmann::ordered_json run_eval(const ExperimentConfig& cfg, const fs::path& ckpt) {
  return cfg.precision == Precision::F32 ? run_eval_impl<float>(cfg, ckpt)
                                         : run_eval_impl<double>(cfg, ckpt);
}

nlohmann::ordered_json run_report(const fs::path& metrics_dir, const fs::path& out_dir) {
  if (!fs::exists(metrics_dir))
    throw MissingInputError("report: directory not found: " + metrics_dir.string());

  std::vector<SweepRow> rows;
  std::vector<nlohmann::json> summaries;
  std::string config_hash;
  for (const auto& entry : fs::recursive_directory_iterator(metrics_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string fname = entry.path().filename().string();
    if (fname == "sweep.csv") {
      std::ifstream f(entry.path());
      std::string line;
      std::getline(f, line);  // header
      while (std::getline(f, line)) {
        std::stringstream ss(line);
        std::string field;
        SweepRow r;
        std::getline(ss, field, ',');
        r.n_domains = std::stoi(field);
        std::getline(ss, r.policy, ',');
        std::getline(ss, field, ',');
        r.seed = std::stoull(field);
        std::getline(ss, field, ',');
        r.acc_general_before = std::stod(field);
        std::getline(ss, field, ',');
        r.acc_general_after = std::stod(field);
        std::getline(ss, field, ',');
        r.retention_general = std::stod(field);
        rows.push_back(r);
      }
    } else if (fname == "summary.json") {
      std::ifstream f(entry.path());
      nlohmann::json j;
      f >> j;
      summaries.push_back(j);
      if (config_hash.empty() && j.contains("config_hash"))
        config_hash = j.at("config_hash").get<std::string>();
    }
  }
  if (rows.empty() && summaries.empty())
    throw MissingInputError("report: no sweep.csv or summary.json under " +
                            metrics_dir.string());

  // mean retention per (policy, N)
  std::map<std::string, std::map<int, std::pair<double, int>>> agg;
  for (const auto& r : rows) {
    auto& cell = agg[r.policy][r.n_domains];
    cell.first += r.retention_general;
    cell.second += 1;
  }
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash;
  nlohmann::ordered_json sweep;
  std::vector<PlotSeries> series;
  for (const auto& [policy, by_n] : agg) {
    nlohmann::ordered_json curve;
    PlotSeries s;
    s.label = policy;
    for (const auto& [n, cell] : by_n) {
      const double mean = cell.first / cell.second;
      curve[std::to_string(n)] = mean;
      s.points.emplace_back(double(n), mean);
    }
    sweep[policy] = curve;
    series.push_back(std::move(s));
  }
  j["sweep_retention"] = sweep;
  j["num_runs"] = summaries.size();
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const auto& s : summaries) runs.push_back(s);
  j["runs"] = runs;

  fs::create_directories(out_dir);
  write_text(out_dir / "summary.json", j.dump(2) + "\n");
  if (!series.empty())
    write_line_plot(out_dir / "retention_vs_domains.svg", "General-suite retention vs domains",
                    "fine-tuned domains", "retention", series);
  return j;
}

}  // namespace moelab
