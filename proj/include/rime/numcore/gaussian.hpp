#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rime/numcore/errors.hpp"

namespace rime {

struct DiagonalGaussian {
  std::vector<double> mean;
  std::vector<double> variance;

  std::size_t dim() const { return mean.size(); }

  void validate() const {
    if (mean.size() != variance.size()) throw DomainError("DiagonalGaussian: mean/variance dimensions differ");
    for (double v : variance) {
      if (!(v > 0.0)) throw DomainError("DiagonalGaussian: variance must be strictly positive");
    }
  }
};

inline double gaussian_log_prob(std::span<const double> x, const DiagonalGaussian& g) {
  g.validate();
  if (x.size() != g.dim()) throw DomainError("gaussian_log_prob: dimension mismatch");
  constexpr double log_two_pi = 1.8378770664093453;
  double lp = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - g.mean[i];
    lp -= 0.5 * (log_two_pi + std::log(g.variance[i]) + d * d / g.variance[i]);
  }
  return lp;
}

/// KL(q || p) in closed form.
inline double kl_diag_gaussians(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  q.validate();
  p.validate();
  if (q.dim() != p.dim()) throw DomainError("kl_diag_gaussians: dimension mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double d = q.mean[i] - p.mean[i];
    kl += 0.5 * (std::log(p.variance[i] / q.variance[i]) + (q.variance[i] + d * d) / p.variance[i] - 1.0);
  }
  return kl;
}

}  // namespace rime
