#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rime/numcore/tensor.hpp"

namespace rime {

struct AdamState {
  long long t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

inline AdamState make_adam(std::span<const Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8) {
  AdamState s;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  for (const auto& p : params) {
    s.m.push_back(Matrix::Zero(p.rows(), p.cols()));
    s.v.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
  return s;
}

/// One bias-corrected Adam update using each parameter's current grad().
/// `names` (optional, parallel to params) labels the diagnostics.
inline void adam_step(AdamState& state, std::span<Tensor> params, std::span<const std::string> names = {}) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ConfigError("adam_step: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = params[i].grad();
    if (g.rows() != state.m[i].rows() || g.cols() != state.m[i].cols()) {
      throw ConfigError("adam_step: shape of parameter " + std::to_string(i) + " changed");
    }
    if (!g.allFinite()) {
      const std::string label = i < names.size() ? names[i] : "#" + std::to_string(i);
      Index bad = 0;
      for (; bad < g.size() && std::isfinite(g.data()[bad]); ++bad) {
      }
      throw NumericalError("adam_step: non-finite gradient in parameter " + label + " (entry " +
                           std::to_string(bad) + " of " + std::to_string(g.size()) + ")");
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = params[i].grad();
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g.cwiseProduct(g);
    params[i].mutable_value().array() -=
        state.lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + state.eps);
  }
}

}  // namespace rime
