#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "crdcgan/core/tape.hpp"

namespace testutil {

using crdcgan::Tensor;

inline double rel_err(double got, double want, double floor = 1e-9) {
  return std::abs(got - want) / std::max({std::abs(got), std::abs(want), floor});
}

// Central finite differences of a scalar-valued function of one tensor.
inline Tensor<double> fd_gradient(const Tensor<double>& x,
                                  const std::function<double(const Tensor<double>&)>& f, double h = 1e-5) {
  Tensor<double> g(x.shape());
  Tensor<double> xp = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double up = f(xp);
    xp[i] = orig - h;
    const double dn = f(xp);
    xp[i] = orig;
    g[i] = (up - dn) / (2 * h);
  }
  return g;
}

// Largest relative error between an analytic and FD gradient, with an
// absolute floor so near-zero entries compare sanely.
inline double max_grad_rel_err(const Tensor<double>& analytic, const Tensor<double>& fd, double floor = 1e-6) {
  double worst = 0;
  for (int64_t i = 0; i < analytic.numel(); ++i) {
    const double a = analytic[i], b = fd[i];
    const double denom = std::max({std::abs(a), std::abs(b), floor});
    worst = std::max(worst, std::abs(a - b) / denom);
  }
  return worst;
}

}  // namespace testutil
