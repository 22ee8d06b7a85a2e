// SPDX-License-Identifier: Apache-2.0
//
// Fine-tuning loop: loss assembly, masked optimizer updates, affinity
// tracking with periodic refresh and expert duplication, and the FFT /
// static-ESFT baseline policies.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "moelab/adaptive_router.hpp"
#include "moelab/datagen.hpp"
#include "moelab/metrics.hpp"
#include "moelab/model.hpp"
#include "moelab/optimizer.hpp"
#include "moelab/schedule.hpp"
#include "moelab/specialization.hpp"

namespace moelab {

enum class Policy { DesMoe, Fft, StaticEsft };

inline Policy parse_policy(const std::string& s) {
  if (s == "des-moe") return Policy::DesMoe;
  if (s == "fft") return Policy::Fft;
  if (s == "static-esft") return Policy::StaticEsft;
  throw ConfigError("unknown policy '" + s + "' (expected des-moe, fft or static-esft)");
}

inline std::string to_string(Policy p) {
  switch (p) {
    case Policy::DesMoe: return "des-moe";
    case Policy::Fft: return "fft";
    default: return "static-esft";
  }
}

struct TrainConfig {
  Policy policy = Policy::DesMoe;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  long long steps = 200;
  long long t_update = 50;
  double phi = kDefaultMaskThreshold;
  double ema_weight = kDefaultEmaWeight;
  double tau = kDefaultRouterTemperature;
  uint64_t seed = 1;
  int batch_size = 32;
  bool mixed_batches = true;
  int duplication_cap = 16;
  long long eval_interval = 100;
  int eval_samples = 32;
  double esft_fraction = 0.25;
  int esft_prepass_batches = 20;
  bool warmup_includes_experts = false;
  bool dges = true;  // expert gradient isolation + duplication + gating
  double t1_fraction = 0.2;
  double t2_fraction = 0.7;

  void validate() const {
    if (steps < 1 || batch_size < 1 || t_update < 1 || eval_interval < 1)
      throw ConfigError("train: steps, batch_size, t_update, eval_interval must be positive");
    if (learning_rate <= 0.0) throw ConfigError("train: learning rate must be positive");
    if (phi <= 0.0 || phi > 1.0) throw ConfigError("train: phi must lie in (0, 1]");
    if (ema_weight < 0.0 || ema_weight > 1.0) throw ConfigError("train: bad ema weight");
    if (tau <= 0.0) throw ConfigError("train: tau must be positive");
    if (esft_fraction <= 0.0 || esft_fraction > 1.0)
      throw ConfigError("train: esft fraction must lie in (0, 1]");
  }
};

struct EvalResult {
  std::vector<double> per_domain;
  double general = 0.0;

  std::vector<double> flat() const {
    auto v = per_domain;
    v.push_back(general);
    return v;
  }
};

struct FinetuneResult {
  std::vector<MetricsRecord> metrics;
  EvalResult before;
  EvalResult after;
  int duplications = 0;
  double final_overlap = 0.0;
};

template <class S>
class Trainer {
public:
  Trainer(MoEModel<S>& model, std::vector<DomainSpec> domains, DomainSpec general_spec,
          TrainConfig cfg, MetricsCsv* metrics = nullptr, EventLog* events = nullptr,
          AffinityCsv* affinity = nullptr)
      : model_(model),
        domains_(std::move(domains)),
        general_spec_(general_spec),
        cfg_(cfg),
        metrics_(metrics),
        events_(events),
        affinity_(affinity) {
    cfg_.validate();
    if (domains_.empty()) throw ArgumentError("trainer: at least one domain required");
    opt_.kind = cfg_.optimizer;
    opt_.learning_rate = cfg_.learning_rate;
    spec_state_ = SpecializationState(model_.config().num_layers,
                                      static_cast<int>(domains_.size()),
                                      model_.config().experts_per_layer, cfg_.phi,
                                      cfg_.ema_weight, cfg_.duplication_cap);
    suite_ = build_eval_suite(domains_, general_spec_, cfg_.eval_samples);
    if (cfg_.policy == Policy::DesMoe) {
      plan_ = PhasePlan::proportional(cfg_.steps, cfg_.t1_fraction, cfg_.t2_fraction);
      blend_.total_steps = cfg_.steps;
      model_.install_adaptive_routers(mix64(cfg_.seed, 0xa17), S(cfg_.tau));
    }
    if (cfg_.policy == Policy::StaticEsft) static_masks_ = static_esft_masks();
    refresh_mask_cache();
  }

  const SpecializationState& specialization() const { return spec_state_; }
  SpecializationState& specialization_mutable() { return spec_state_; }
  const std::vector<DomainExpertMask>& current_masks() const { return mask_cache_; }
  const PhasePlan& plan() const { return plan_; }

  Tensor<S> task_loss(Tape<S>& tape, const Tensor<S>& logits, const PackedBatch& batch) {
    if (batch.tokens.empty()) throw ArgumentError("task_loss: empty batch");
    return tape.cross_entropy(logits, batch.targets);
  }

  // Groups the optimizer may touch at step t for this batch. In mixed mode
  // the schedule unions the batch's domains; the token-level filter keeps
  // per-domain contributions exact underneath.
  UpdateMask mask_for_step(long long t, const std::vector<int>& batch_domains) {
    switch (cfg_.policy) {
      case Policy::Fft: {
        UpdateMask m;
        for (const auto& g : model_.groups()) m.groups.insert(g.name);
        return m;
      }
      case Policy::StaticEsft: {
        UpdateMask m;
        for (const auto& g : model_.groups()) {
          if (g.kind != GroupKind::Expert) continue;
          for (int d : batch_domains) {
            const auto& row = static_masks_[static_cast<size_t>(g.layer)][static_cast<size_t>(d)];
            if (g.expert < static_cast<int>(row.size()) && row[static_cast<size_t>(g.expert)]) {
              m.groups.insert(g.name);
              break;
            }
          }
        }
        return m;
      }
      default:
        return update_mask(plan_, t, batch_domains,
                           cfg_.dges ? mask_cache_ : all_ones_masks(), model_,
                           cfg_.warmup_includes_experts);
    }
  }

  MetricsRecord train_step(long long t) {
    const int num_domains = static_cast<int>(domains_.size());
    const int grouped_domain = static_cast<int>((t - 1) % num_domains);
    DomainBatch batch =
        cfg_.mixed_batches
            ? sample_batch(domains_, t - 1, cfg_.batch_size, BatchMode::Mixed)
            : sample_batch(domains_, t - 1, cfg_.batch_size, BatchMode::Grouped, grouped_domain);
    return train_step_on(t, batch);
  }

  MetricsRecord train_step_on(long long t, const DomainBatch& batch) {
    const PackedBatch packed = pack(batch, model_.config().sep_token());
    std::vector<int> batch_domains = distinct_domains(packed);

    model_.zero_grads();
    Tape<S> tape;
    ForwardOptions opts;
    opts.training = true;
    opts.use_adaptive = cfg_.policy == Policy::DesMoe;
    opts.token_domains = &packed.token_domain;
    const bool filter_active =
        (cfg_.policy == Policy::DesMoe && cfg_.dges) || cfg_.policy == Policy::StaticEsft;
    const auto& filter_masks =
        cfg_.policy == Policy::StaticEsft ? static_masks_ : mask_cache_;
    if (filter_active) opts.update_gate = &filter_masks;

    auto result = model_.forward(tape, packed, opts);
    auto task = task_loss(tape, result.logits, packed);

    double kd_value = 0.0;
    double lambda = 0.0;
    if (cfg_.policy == Policy::DesMoe) {
      blend_.completed = t - 1;
      lambda = blend_.lambda();
      Tensor<S> kd = layer_mean_kd(tape, result);
      kd_value = double(kd.item());
      tape.backward(task);
      scale_router_grads(S(1.0 - lambda));
      if (lambda > 0.0) {
        tape.zero_activation_grads();
        tape.backward(kd, S(lambda));
      }
    } else {
      tape.backward(task);
    }

    const double task_value = double(task.item());
    if (!std::isfinite(task_value) || !std::isfinite(kd_value)) {
      if (events_) events_->log(t, "abort", "reason=nan_loss");
      throw NumericError("non-finite loss at step " + std::to_string(t));
    }

    // grouped-mode filter (Eq.-style buffer zeroing); mixed batches are
    // handled structurally inside moe_forward
    if (filter_active && batch_domains.size() == 1)
      expert_gradient_filter(model_, filter_masks, batch_domains[0]);

    const UpdateMask umask = mask_for_step(t, batch_domains);
    opt_.step(model_, umask);

    spec_state_.accumulate(result, packed.token_domain);
    if (cfg_.policy == Policy::DesMoe && t % cfg_.t_update == 0) refresh_specialization(t);

    if (cfg_.policy == Policy::DesMoe) {
      const Phase phase = plan_.phase_of(t);
      if (!last_phase_ || *last_phase_ != phase) {
        if (events_)
          events_->log(t, "phase", "phase=" + to_string(phase) +
                              " trainable_groups=" + std::to_string(umask.groups.size()));
        last_phase_ = phase;
      }
    }

    MetricsRecord rec;
    rec.step = t;
    rec.phase = cfg_.policy == Policy::DesMoe ? to_string(plan_.phase_of(t)) : "-";
    rec.task_loss = task_value;
    rec.kd_loss = kd_value;
    rec.lambda = lambda;
    rec.total_loss = task_value + lambda * kd_value;
    rec.trainable_fraction = trainable_fraction(umask);
    rec.mean_overlap = spec_state_.mean_cross_domain_overlap();
    return rec;
  }

  EvalResult evaluate() const {
    EvalResult out;
    const bool adaptive = cfg_.policy == Policy::DesMoe;
    for (const auto& samples : suite_.per_domain)
      out.per_domain.push_back(exact_match_eval(model_, samples, adaptive));
    out.general = exact_match_eval(model_, suite_.general, adaptive);
    return out;
  }

  FinetuneResult run() {
    FinetuneResult result;
    result.before = evaluate();
    for (long long t = 1; t <= cfg_.steps; ++t) {
      MetricsRecord rec = train_step(t);
      if (t % cfg_.eval_interval == 0) {
        const EvalResult ev = evaluate();
        rec.acc_domain = ev.per_domain;
        rec.acc_general = ev.general;
        result.metrics.push_back(rec);
        if (metrics_) metrics_->append(rec);
      }
    }
    result.after = evaluate();
    result.duplications = static_cast<int>(spec_state_.duplication_log().size());
    result.final_overlap = spec_state_.mean_cross_domain_overlap();
    return result;
  }

  // Affinity pre-pass with the pretrained linear router: per layer and
  // domain, the top ceil(esft_fraction * E) experts become the fixed mask.
  std::vector<DomainExpertMask> static_esft_masks() {
    const int layers = model_.config().num_layers;
    const int experts = model_.config().experts_per_layer;
    const int num_domains = static_cast<int>(domains_.size());
    SpecializationState probe(layers, num_domains, experts);
    ForwardOptions opts;  // linear router, no gating
    for (int d = 0; d < num_domains; ++d)
      for (int j = 0; j < cfg_.esft_prepass_batches; ++j) {
        DomainBatch batch = sample_batch(domains_, kPrepassStep + j, cfg_.batch_size,
                                         BatchMode::Grouped, d);
        const PackedBatch packed = pack(batch, model_.config().sep_token());
        Tape<S> tape;
        tape.grad_enabled = false;
        auto result = model_.forward(tape, packed, opts);
        probe.accumulate(result, packed.token_domain);
      }
    const int keep = static_cast<int>(std::ceil(cfg_.esft_fraction * experts));
    std::vector<DomainExpertMask> masks;
    for (int l = 0; l < layers; ++l) {
      const auto raw = probe.layer(l).raw_affinity();
      DomainExpertMask layer_mask(static_cast<size_t>(num_domains),
                                  std::vector<uint8_t>(static_cast<size_t>(experts), 0));
      for (int d = 0; d < num_domains; ++d) {
        std::vector<int> order(static_cast<size_t>(experts));
        for (int e = 0; e < experts; ++e) order[static_cast<size_t>(e)] = e;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
          return raw[static_cast<size_t>(d)][static_cast<size_t>(a)] >
                 raw[static_cast<size_t>(d)][static_cast<size_t>(b)];
        });
        for (int i = 0; i < keep; ++i)
          layer_mask[static_cast<size_t>(d)][static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
      }
      masks.push_back(std::move(layer_mask));
    }
    return masks;
  }

  static constexpr long long kPrepassStep = 10'000'000;

private:
  MoEModel<S>& model_;
  std::vector<DomainSpec> domains_;
  DomainSpec general_spec_;
  TrainConfig cfg_;
  MetricsCsv* metrics_ = nullptr;
  EventLog* events_ = nullptr;
  AffinityCsv* affinity_ = nullptr;

  Optimizer<S> opt_;
  SpecializationState spec_state_;
  EvalSuite suite_;
  PhasePlan plan_{1, 1, 1};  // placeholder until DES construction
  BlendSchedule blend_;
  std::vector<DomainExpertMask> static_masks_;
  std::vector<DomainExpertMask> mask_cache_;
  std::optional<Phase> last_phase_;

  static std::vector<int> distinct_domains(const PackedBatch& packed) {
    std::vector<int> out;
    for (int d : packed.seq_domain)
      if (std::find(out.begin(), out.end(), d) == out.end()) out.push_back(d);
    std::sort(out.begin(), out.end());
    return out;
  }

  Tensor<S> layer_mean_kd(Tape<S>& tape, const ForwardResult<S>& result) {
    Tensor<S> acc;
    for (size_t l = 0; l < result.layers.size(); ++l) {
      const auto& moe = model_.blocks()[l].moe;
      Tensor<S> kd = kd_loss(tape, *moe.adaptive, result.layers[l].router_input);
      acc = acc.defined() ? tape.add(acc, kd) : kd;
    }
    return tape.scale(acc, S(1.0 / double(result.layers.size())));
  }

  void scale_router_grads(S factor) {
    for (const auto& g : model_.groups()) {
      if (g.kind != GroupKind::Router) continue;
      for (const auto& t : g.tensors) {
        Tensor<S> h = t;
        if (!h.has_grad()) continue;
        for (auto& v : h.grad()) v *= factor;
      }
    }
  }

  void refresh_mask_cache() { mask_cache_ = spec_state_.masks(); }

  double trainable_fraction(const UpdateMask& mask) const {
    long long allowed = 0, total = 0;
    for (const auto& g : model_.groups()) {
      const long long n = g.num_params();
      total += n;
      if (mask.allows(g.name)) allowed += n;
    }
    return total == 0 ? 0.0 : double(allowed) / double(total);
  }

  std::vector<DomainExpertMask> all_ones_masks() const {
    std::vector<DomainExpertMask> out;
    for (const auto& st : spec_state_.layers())
      out.emplace_back(static_cast<size_t>(st.num_domains()),
                       std::vector<uint8_t>(static_cast<size_t>(st.num_experts()), 1));
    return out;
  }

  void refresh_specialization(long long t) {
    // fresh fractions before the refresh resets the counters
    std::vector<std::vector<std::vector<double>>> raws;
    for (const auto& st : spec_state_.layers()) raws.push_back(st.raw_affinity());
    spec_state_.ema_refresh_all();
    if (cfg_.dges) {
      const auto made = spec_state_.resolve_shared_experts(model_, t);
      for (const auto& rec : made) {
        if (events_)
          events_->log(t, "duplication",
                       "layer=" + std::to_string(rec.layer) + " source=" +
                           std::to_string(rec.source) + " copy=" + std::to_string(rec.copy) +
                           " domain=" + std::to_string(rec.domain));
      }
    }
    refresh_mask_cache();
    if (affinity_) {
      for (size_t l = 0; l < spec_state_.layers().size(); ++l) {
        const auto& st = spec_state_.layers()[l];
        for (int d = 0; d < st.num_domains(); ++d)
          for (int e = 0; e < st.num_experts(); ++e) {
            const auto& raw_row = raws[l][static_cast<size_t>(d)];
            const double raw = e < static_cast<int>(raw_row.size())
                                   ? raw_row[static_cast<size_t>(e)]
                                   : 0.0;  // expert added by this refresh
            affinity_->append(t, static_cast<int>(l), d, e, raw,
                              st.smoothed()[static_cast<size_t>(d)][static_cast<size_t>(e)],
                              st.mask()[static_cast<size_t>(d)][static_cast<size_t>(e)]);
          }
      }
    }
  }
};

}  // namespace moelab
