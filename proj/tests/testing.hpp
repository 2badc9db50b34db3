#pragma once

// Shared helpers for the test suites. The oracles here are deliberately
// independent of the library's forward/backward code paths: brute-force
// loops and central finite differences only.

#include <cmath>
#include <functional>
#include <vector>

#include "peftlab/tensor.hpp"

namespace testing_support {

// Triple-loop matrix product, the oracle for peftlab::matmul.
inline std::vector<double> matmul_oracle(const std::vector<double>& a,
                                         const std::vector<double>& b, int m, int k, int n) {
  std::vector<double> c(size_t(m) * size_t(n), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p)
        c[size_t(i * n + j)] += a[size_t(i * k + p)] * b[size_t(p * n + j)];
  return c;
}

// Central finite difference of a scalar loss with respect to one coordinate
// of `param`. `loss_fn` must rebuild the whole forward pass from scratch.
inline double fd_grad(peftlab::Tensor& param, int64_t index,
                      const std::function<double()>& loss_fn, double step = 1e-5) {
  double& x = param.data()[size_t(index)];
  const double saved = x;
  x = saved + step;
  const double up = loss_fn();
  x = saved - step;
  const double down = loss_fn();
  x = saved;
  return (up - down) / (2.0 * step);
}

// Relative error with a floor so that near-zero gradients do not blow up the
// ratio on roundoff noise.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

// Checks every coordinate of `param` against finite differences and returns
// the worst relative error.
inline double max_grad_rel_err(peftlab::Tensor& param, const std::vector<double>& analytic,
                               const std::function<double()>& loss_fn, double step = 1e-5) {
  double worst = 0.0;
  for (int64_t i = 0; i < param.size(); ++i) {
    const double fd = fd_grad(param, i, loss_fn, step);
    worst = std::max(worst, rel_err(analytic[size_t(i)], fd));
  }
  return worst;
}

}  // namespace testing_support
