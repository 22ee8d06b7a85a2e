// SPDX-License-Identifier: Apache-2.0
//
// Two-layer MLP router that replaces a layer's linear routing logits during
// fine-tuning. A frozen copy of the linear router serves as distillation
// teacher; the blend between distillation and task signal decays linearly
// over the run.
#pragma once

#include <algorithm>
#include <cstdint>

#include "moelab/random.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// W2's first model_dim rows start as a copy of the pretrained router weights
// (scaled by this factor); remaining rows start at zero.
inline constexpr double kRouterCopyScale = 1.0;
inline constexpr double kDefaultRouterTemperature = 0.7;

template <class S>
struct AdaptiveRouter {
  Tensor<S> w1;  // [d x 4d]
  Tensor<S> b1;  // [4d]
  Tensor<S> w2;  // [4d x E], column count tracks the live expert count
  Tensor<S> b2;  // [E]
  // frozen teacher: the linear router as it was when fine-tuning began
  Tensor<S> teacher_w;
  Tensor<S> teacher_b;
  S tau = S(kDefaultRouterTemperature);

  int hidden_dim() const { return w1.shape()[1]; }
  int num_experts() const { return w2.shape()[1]; }
};

template <class S>
AdaptiveRouter<S> init_adaptive_router(const Tensor<S>& router_w, const Tensor<S>& router_b,
                                       uint64_t seed,
                                       S tau = S(kDefaultRouterTemperature)) {
  if (router_w.ndim() != 2 || router_b.ndim() != 1 ||
      router_b.shape()[0] != router_w.shape()[1])
    throw ArgumentError("init_adaptive_router: original router must be [d x E] with [E] bias");
  const int d = router_w.shape()[0];
  const int experts = router_w.shape()[1];
  const int hidden = 4 * d;

  AdaptiveRouter<S> r;
  // Kaiming fan-in normal, std = sqrt(2/d)
  r.w1 = Tensor<S>::zeros({d, hidden}, /*requires_grad=*/true);
  Rng rng(mix64(seed, 0x414c52ULL));
  const double std1 = std::sqrt(2.0 / d);
  for (auto& v : r.w1.values()) v = S(rng.normal() * std1);
  r.b1 = Tensor<S>::zeros({hidden}, true);
  r.w2 = Tensor<S>::zeros({hidden, experts}, true);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < experts; ++j)
      r.w2.at(i, j) = S(kRouterCopyScale) * router_w.at(i, j);
  r.b2 = Tensor<S>::zeros({experts}, true);

  r.teacher_w = Tensor<S>::from(router_w.shape(), router_w.values());
  r.teacher_b = Tensor<S>::from(router_b.shape(), router_b.values());
  r.tau = tau;
  return r;
}

template <class S>
Tensor<S> adapt_route(Tape<S>& tape, const AdaptiveRouter<S>& r, const Tensor<S>& h) {
  auto hidden = tape.gelu(tape.add_bias(tape.matmul(h, r.w1), r.b1));
  return tape.add_bias(tape.matmul(hidden, r.w2), r.b2);
}

template <class S>
Tensor<S> teacher_route(Tape<S>& tape, const AdaptiveRouter<S>& r, const Tensor<S>& h) {
  return tape.add_bias(tape.matmul(h, r.teacher_w), r.teacher_b);
}

// Mean over tokens of KL(teacher || student) at temperature tau. The input
// representation is detached, so gradients reach only the adaptive-router
// parameters.
template <class S>
Tensor<S> kd_loss(Tape<S>& tape, const AdaptiveRouter<S>& r, const Tensor<S>& h) {
  if (r.tau <= S(0)) throw ArgumentError("kd_loss: temperature must be positive");
  auto hd = h.detach();
  const S inv_tau = S(1) / r.tau;
  auto teacher = tape.softmax(tape.scale(teacher_route(tape, r, hd), inv_tau));
  auto student = tape.log_softmax(tape.scale(adapt_route(tape, r, hd), inv_tau));
  return tape.kl_divergence(teacher.detach(), student);
}

// lambda decays linearly with the fraction of fine-tuning completed.
struct BlendSchedule {
  long long total_steps = 1;
  long long completed = 0;

  double alpha() const {
    if (total_steps <= 0) return 1.0;
    return std::min(1.0, std::max(0.0, double(completed) / double(total_steps)));
  }
  static double lambda_of(double alpha) { return std::max(0.0, 1.0 - alpha); }
  double lambda() const { return lambda_of(alpha()); }
};

template <class S>
Tensor<S> router_loss(Tape<S>& tape, const Tensor<S>& kd, const Tensor<S>& task,
                      const BlendSchedule& schedule) {
  const S lam = S(schedule.lambda());
  return tape.add_scaled(kd, lam, task, S(1) - lam);
}

}  // namespace moelab
