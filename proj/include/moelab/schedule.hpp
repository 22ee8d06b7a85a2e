// SPDX-License-Identifier: Apache-2.0
//
// Three-phase parameter-freezing schedule: WarmUp trains router + backbone,
// Stabilization trains router + the batch domain's experts, Consolidation
// trains those experts alone.
#pragma once

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "moelab/model.hpp"
#include "moelab/specialization.hpp"

namespace moelab {

enum class Phase { WarmUp, Stabilization, Consolidation };

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::WarmUp: return "warmup";
    case Phase::Stabilization: return "stabilization";
    default: return "consolidation";
  }
}

struct PhasePlan {
  long long total_steps = 0;
  long long t1 = 0;  // last WarmUp step
  long long t2 = 0;  // last Stabilization step

  static PhasePlan proportional(long long total, double f1 = 0.2, double f2 = 0.7) {
    PhasePlan p;
    p.total_steps = total;
    p.t1 = static_cast<long long>(std::ceil(f1 * double(total)));
    p.t2 = static_cast<long long>(std::ceil(f2 * double(total)));
    p.validate();
    return p;
  }

  void validate() const {
    if (!(0 < t1 && t1 < t2 && t2 <= total_steps))
      throw ArgumentError("phase plan requires 0 < T1 < T2 <= T (got T1=" + std::to_string(t1) +
                          ", T2=" + std::to_string(t2) + ", T=" + std::to_string(total_steps) +
                          ")");
  }

  Phase phase_of(long long t) const {
    if (t < 1 || t > total_steps)
      throw ArgumentError("phase_of: step " + std::to_string(t) + " outside [1, " +
                          std::to_string(total_steps) + "]");
    if (t <= t1) return Phase::WarmUp;
    if (t <= t2) return Phase::Stabilization;
    return Phase::Consolidation;
  }
};

struct UpdateMask {
  std::set<std::string> groups;

  bool allows(const std::string& name) const { return groups.count(name) != 0; }
};

// Parameter groups allowed to update at step t for the given batch domains.
// `warmup_includes_experts` widens WarmUp to the expert groups (ablation of
// the stricter default).
template <class S>
UpdateMask update_mask(const PhasePlan& plan, long long t, const std::vector<int>& batch_domains,
                       const std::vector<DomainExpertMask>& masks, const MoEModel<S>& model,
                       bool warmup_includes_experts = false) {
  const Phase phase = plan.phase_of(t);
  UpdateMask out;
  auto expert_allowed = [&](int layer, int expert) {
    const auto& layer_mask = masks[static_cast<size_t>(layer)];
    for (int d : batch_domains) {
      if (d < 0 || d >= static_cast<int>(layer_mask.size())) continue;
      const auto& row = layer_mask[static_cast<size_t>(d)];
      if (expert < static_cast<int>(row.size()) && row[static_cast<size_t>(expert)]) return true;
    }
    return false;
  };
  for (const auto& g : model.groups()) {
    bool allowed = false;
    switch (phase) {
      case Phase::WarmUp:
        allowed = g.kind == GroupKind::Router || g.kind == GroupKind::Backbone ||
                  (warmup_includes_experts &&
                   (g.kind == GroupKind::Expert || g.kind == GroupKind::SharedExpert));
        break;
      case Phase::Stabilization:
        allowed = g.kind == GroupKind::Router ||
                  (g.kind == GroupKind::Expert && expert_allowed(g.layer, g.expert));
        break;
      case Phase::Consolidation:
        allowed = g.kind == GroupKind::Expert && expert_allowed(g.layer, g.expert);
        break;
    }
    if (allowed) out.groups.insert(g.name);
  }
  return out;
}

}  // namespace moelab
