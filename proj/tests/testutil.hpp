// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab::testutil {

// Central-difference gradient of a scalar function of one tensor's entries.
// The function must rebuild its graph on every call.
template <class S>
std::vector<double> central_diff(Tensor<S>& param, const std::function<double()>& eval,
                                 double step = 1e-5) {
  std::vector<double> out(param.values().size(), 0.0);
  for (size_t i = 0; i < param.values().size(); ++i) {
    const S keep = param.values()[i];
    param.values()[i] = keep + S(step);
    const double up = eval();
    param.values()[i] = keep - S(step);
    const double down = eval();
    param.values()[i] = keep;
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

inline double rel_err(double got, double want, double floor = 1e-8) {
  return std::abs(got - want) / std::max(std::abs(want), floor);
}

// max relative error between an analytic gradient buffer and its
// finite-difference oracle
template <class S>
double max_rel_err(const std::vector<S>& grad, const std::vector<double>& fd,
                   double floor = 1e-6) {
  double worst = 0.0;
  for (size_t i = 0; i < fd.size(); ++i) {
    const double g = grad.empty() ? 0.0 : double(grad[i]);
    worst = std::max(worst, rel_err(g, fd[i], floor));
  }
  return worst;
}

}  // namespace moelab::testutil
