// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>

#include "moelab/model.hpp"
#include "moelab/schedule.hpp"

namespace moelab {

enum class OptimizerKind { Adam, Sgd };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

// Masked parameter updates. Groups outside the mask are skipped entirely
// (values and moment buffers stay bit-identical). Moment buffers live on the
// tensors themselves; each tensor keeps its own update count for bias
// correction.
template <class S>
struct Optimizer {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void step(MoEModel<S>& model, const UpdateMask& mask) {
    for (const auto& g : model.groups()) {
      if (!mask.allows(g.name)) continue;
      for (const auto& t : g.tensors) {
        Tensor<S> h = t;
        update(h);
      }
    }
  }

  void step_all(MoEModel<S>& model) {
    for (const auto& g : model.groups())
      for (const auto& t : g.tensors) {
        Tensor<S> h = t;
        update(h);
      }
  }

  void update(Tensor<S>& t) {
    auto data = t.impl();
    const size_t n = data->value.size();
    if (kind == OptimizerKind::Sgd) {
      if (data->grad.empty()) return;
      for (size_t i = 0; i < n; ++i) data->value[i] -= S(learning_rate) * data->grad[i];
      return;
    }
    if (data->opt_m.empty()) {
      data->opt_m.assign(n, S(0));
      data->opt_v.assign(n, S(0));
    }
    data->opt_steps += 1;
    const double c1 = 1.0 - std::pow(beta1, double(data->opt_steps));
    const double c2 = 1.0 - std::pow(beta2, double(data->opt_steps));
    const bool has_grad = !data->grad.empty();
    for (size_t i = 0; i < n; ++i) {
      const S g = has_grad ? data->grad[i] : S(0);
      data->opt_m[i] = S(beta1) * data->opt_m[i] + S(1.0 - beta1) * g;
      data->opt_v[i] = S(beta2) * data->opt_v[i] + S(1.0 - beta2) * g * g;
      const S mhat = data->opt_m[i] / S(c1);
      const S vhat = data->opt_v[i] / S(c2);
      data->value[i] -= S(learning_rate) * mhat / (std::sqrt(vhat) + S(eps));
    }
  }
};

}  // namespace moelab
