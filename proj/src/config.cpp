// SPDX-License-Identifier: Apache-2.0
#include "moelab/config.hpp"

#include <fstream>
#include <set>

namespace moelab {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <class T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
}

ModelConfig parse_model(const nlohmann::json& j, Precision precision) {
  reject_unknown(j,
                 {"vocab_size", "model_dim", "num_layers", "experts_per_layer", "top_k",
                  "shared_expert", "expert_hidden_dim", "attention"},
                 "model");
  ModelConfig m;
  m.vocab_size = get_or(j, "vocab_size", m.vocab_size);
  m.model_dim = get_or(j, "model_dim", m.model_dim);
  m.num_layers = get_or(j, "num_layers", m.num_layers);
  m.experts_per_layer = get_or(j, "experts_per_layer", m.experts_per_layer);
  m.top_k = get_or(j, "top_k", m.top_k);
  m.shared_expert = get_or(j, "shared_expert", m.shared_expert);
  m.expert_hidden_dim = get_or(j, "expert_hidden_dim", m.expert_hidden_dim);
  m.attention = get_or(j, "attention", m.attention);
  m.precision = precision;
  return m;
}

DomainSpec parse_domain(const nlohmann::json& j, int index, uint64_t default_seed) {
  reject_unknown(j, {"kind", "seed", "min_len", "max_len", "value_lo", "value_hi"}, "domain");
  DomainSpec d;
  d.id = index;
  if (!j.contains("kind")) throw ConfigError("domain missing 'kind'");
  d.kind = parse_task_kind(j.at("kind").get<std::string>());
  d.seed = get_or<uint64_t>(j, "seed", default_seed);
  d.min_len = get_or(j, "min_len", d.min_len);
  d.max_len = get_or(j, "max_len", d.max_len);
  d.value_lo = get_or(j, "value_lo", d.value_lo);
  d.value_hi = get_or(j, "value_hi", d.value_hi);
  return d;
}

TrainConfig parse_train(const nlohmann::json& j, const std::string& where, uint64_t seed,
                        bool finetune_section) {
  std::set<std::string> allowed = {"steps",         "batch_size", "learning_rate",
                                   "eval_interval", "optimizer",  "eval_samples"};
  if (finetune_section) {
    allowed.insert({"policy", "t_update", "phi", "ema_weight", "tau", "mixed_batches",
                    "duplication_cap", "esft_fraction", "esft_prepass_batches",
                    "warmup_includes_experts", "dges", "t1_fraction", "t2_fraction"});
  }
  reject_unknown(j, allowed, where);
  TrainConfig c;
  c.seed = seed;
  c.steps = get_or<long long>(j, "steps", c.steps);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.learning_rate = get_or(j, "learning_rate", c.learning_rate);
  c.eval_interval = get_or<long long>(j, "eval_interval", c.eval_interval);
  c.eval_samples = get_or(j, "eval_samples", c.eval_samples);
  c.optimizer = parse_optimizer(get_or<std::string>(j, "optimizer", "adam"));
  if (finetune_section) {
    c.policy = parse_policy(get_or<std::string>(j, "policy", "des-moe"));
    c.t_update = get_or<long long>(j, "t_update", c.t_update);
    c.phi = get_or(j, "phi", c.phi);
    c.ema_weight = get_or(j, "ema_weight", c.ema_weight);
    c.tau = get_or(j, "tau", c.tau);
    c.mixed_batches = get_or(j, "mixed_batches", c.mixed_batches);
    c.duplication_cap = get_or(j, "duplication_cap", c.duplication_cap);
    c.esft_fraction = get_or(j, "esft_fraction", c.esft_fraction);
    c.esft_prepass_batches = get_or(j, "esft_prepass_batches", c.esft_prepass_batches);
    c.warmup_includes_experts = get_or(j, "warmup_includes_experts", c.warmup_includes_experts);
    c.dges = get_or(j, "dges", c.dges);
    c.t1_fraction = get_or(j, "t1_fraction", c.t1_fraction);
    c.t2_fraction = get_or(j, "t2_fraction", c.t2_fraction);
  } else {
    c.policy = Policy::Fft;  // pretraining is ordinary full training
    c.mixed_batches = true;
  }
  c.validate();
  return c;
}

}  // namespace

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw MissingInputError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"name", "output_dir", "seed", "precision", "model", "domains", "general",
                  "pretrain", "finetune"},
                 "config");
  ExperimentConfig c;
  c.name = get_or<std::string>(j, "name", c.name);
  c.output_dir = get_or<std::string>(j, "output_dir", c.output_dir);
  c.seed = get_or<uint64_t>(j, "seed", c.seed);
  c.precision = parse_precision(get_or<std::string>(j, "precision", "f32"));
  c.model = parse_model(j.value("model", nlohmann::json::object()), c.precision);
  if (!j.contains("domains") || !j.at("domains").is_array() || j.at("domains").empty())
    throw ConfigError("config needs a non-empty 'domains' array");
  int index = 0;
  for (const auto& dj : j.at("domains")) {
    c.domains.push_back(parse_domain(dj, index, 1000 + uint64_t(index)));
    ++index;
  }
  nlohmann::json gj = j.value("general", nlohmann::json::object({{"kind", "lm"}}));
  c.general = parse_domain(gj, index, 9000);
  c.pretrain = parse_train(j.value("pretrain", nlohmann::json::object()), "pretrain", c.seed,
                           /*finetune_section=*/false);
  c.finetune = parse_train(j.value("finetune", nlohmann::json::object()), "finetune", c.seed,
                           /*finetune_section=*/true);
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  model.validate();
  if (domains.empty()) throw ConfigError("at least one domain required");
  std::set<std::string> kinds;
  for (const auto& d : domains) {
    d.validate();
    if (!kinds.insert(to_string(d.kind)).second)
      throw ConfigError("task kinds must be pairwise distinct (duplicate '" +
                        to_string(d.kind) + "')");
    if (d.value_hi >= model.sep_token())
      throw ConfigError("domain value range collides with the separator token");
  }
  general.validate();
  if (general.kind != TaskKind::Lm) throw ConfigError("general suite must use the lm task");
  if (general.value_hi >= model.sep_token())
    throw ConfigError("general value range collides with the separator token");
}

nlohmann::ordered_json ExperimentConfig::echo() const {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["output_dir"] = output_dir;
  j["seed"] = seed;
  j["precision"] = to_string(precision);
  nlohmann::ordered_json m;
  m["vocab_size"] = model.vocab_size;
  m["model_dim"] = model.model_dim;
  m["num_layers"] = model.num_layers;
  m["experts_per_layer"] = model.experts_per_layer;
  m["top_k"] = model.top_k;
  m["shared_expert"] = model.shared_expert;
  m["expert_hidden_dim"] = model.expert_hidden_dim;
  m["attention"] = model.attention;
  j["model"] = m;
  auto domain_json = [](const DomainSpec& d) {
    nlohmann::ordered_json dj;
    dj["kind"] = to_string(d.kind);
    dj["seed"] = d.seed;
    dj["min_len"] = d.min_len;
    dj["max_len"] = d.max_len;
    dj["value_lo"] = d.value_lo;
    dj["value_hi"] = d.value_hi;
    return dj;
  };
  j["domains"] = nlohmann::ordered_json::array();
  for (const auto& d : domains) j["domains"].push_back(domain_json(d));
  j["general"] = domain_json(general);
  auto train_json = [](const TrainConfig& t, bool finetune_section) {
    nlohmann::ordered_json tj;
    tj["steps"] = t.steps;
    tj["batch_size"] = t.batch_size;
    tj["learning_rate"] = t.learning_rate;
    tj["eval_interval"] = t.eval_interval;
    tj["eval_samples"] = t.eval_samples;
    tj["optimizer"] = t.optimizer == OptimizerKind::Adam ? "adam" : "sgd";
    if (finetune_section) {
      tj["policy"] = to_string(t.policy);
      tj["t_update"] = t.t_update;
      tj["phi"] = t.phi;
      tj["ema_weight"] = t.ema_weight;
      tj["tau"] = t.tau;
      tj["mixed_batches"] = t.mixed_batches;
      tj["duplication_cap"] = t.duplication_cap;
      tj["esft_fraction"] = t.esft_fraction;
      tj["esft_prepass_batches"] = t.esft_prepass_batches;
      tj["warmup_includes_experts"] = t.warmup_includes_experts;
      tj["dges"] = t.dges;
      tj["t1_fraction"] = t.t1_fraction;
      tj["t2_fraction"] = t.t2_fraction;
    }
    return tj;
  };
  j["pretrain"] = train_json(pretrain, false);
  j["finetune"] = train_json(finetune, true);
  return j;
}

}  // namespace moelab
