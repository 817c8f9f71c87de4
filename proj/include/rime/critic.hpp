#pragma once

// Density-ratio mutual-information critic. D_phi separates "real" rows
// (side, r(x), y, z) drawn from the joint from "fake" rows whose z column has
// been shuffled, which samples the product of marginals. At the optimum
// D / (1 - D) = p(joint) / p(product), so the mean log-ratio over real rows
// estimates I[(side, r, y); z].

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "rime/numcore.hpp"

namespace rime {

enum class CriticVariant { kUninformed, kKnowledge, kContext };
enum class MiForm { kLogRatio, kRatio };

inline std::string to_string(CriticVariant v) {
  switch (v) {
    case CriticVariant::kUninformed: return "uninformed";
    case CriticVariant::kKnowledge: return "k";
    case CriticVariant::kContext: return "c";
  }
  return "?";
}

inline CriticVariant parse_critic_variant(const std::string& s) {
  if (s == "uninformed" || s == "none") return CriticVariant::kUninformed;
  if (s == "k" || s == "k_informed") return CriticVariant::kKnowledge;
  if (s == "c" || s == "c_informed") return CriticVariant::kContext;
  throw ConfigError("unknown critic variant '" + s + "' (expected uninformed, k or c)");
}

inline std::string to_string(MiForm f) { return f == MiForm::kLogRatio ? "log" : "ratio"; }

inline MiForm parse_mi_form(const std::string& s) {
  if (s == "log" || s == "log_ratio") return MiForm::kLogRatio;
  if (s == "ratio") return MiForm::kRatio;
  throw ConfigError("unknown MI form '" + s + "' (expected log or ratio)");
}

/// D is clamped to [kCriticClamp, 1 - kCriticClamp] inside the penalty.
inline constexpr double kCriticClamp = 1e-6;

struct CriticConfig {
  CriticVariant variant = CriticVariant::kUninformed;
  std::vector<int> hidden{64, 64};
  Activation activation = Activation::kTanh;
  MiForm mi_form = MiForm::kLogRatio;
  int updates_per_step = 8;
  int batch_rows = 512;
  double lr = 1e-3;

  void validate() const {
    if (updates_per_step < 1) throw ConfigError("CriticConfig: updates_per_step must be >= 1");
    if (batch_rows < 2) throw ConfigError("CriticConfig: batch_rows must be >= 2");
    if (!(lr > 0.0)) throw ConfigError("CriticConfig: lr must be positive");
  }

  /// Width of the side-information block for a model with the given dims.
  int side_dim(int d_k, int d_c) const {
    switch (variant) {
      case CriticVariant::kUninformed: return 0;
      case CriticVariant::kKnowledge: return d_k;
      case CriticVariant::kContext: return d_c;
    }
    return 0;
  }
};

/// Real rows and their z-shuffled counterparts; the last column is z.
struct CriticBatch {
  Matrix real;
  Matrix fake;
};

/// Fake rows: the real rows with the z column put through a uniform random
/// permutation (fixed points allowed).
inline CriticBatch make_marginal_batch(Rng& rng, const Matrix& real) {
  if (real.rows() < 2) throw UsageError("make_marginal_batch: need at least 2 rows to shuffle z");
  if (real.cols() < 2) throw ConfigError("make_marginal_batch: rows need features and a z column");
  CriticBatch b{real, real};
  std::vector<Index> perm(static_cast<std::size_t>(real.rows()));
  for (Index i = 0; i < real.rows(); ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(perm);
  const Index zc = real.cols() - 1;
  for (Index i = 0; i < real.rows(); ++i) b.fake(i, zc) = real(perm[static_cast<std::size_t>(i)], zc);
  return b;
}

/// Row features for the critic: [side | r | y | z] where side is empty,
/// the task knowledge, or the context-posterior mean, gathered per row.
/// `side_per_task` is B x side_dim (ignored when uninformed).
inline Tensor critic_inputs(CriticVariant variant, const Tensor& side_per_task, std::span<const Index> task,
                            const Tensor& r, const Matrix& y, const Matrix& z) {
  if (r.rows() != y.rows() || r.rows() != z.rows() || static_cast<Index>(task.size()) != r.rows()) {
    throw ConfigError("critic_inputs: r, y, z and task must have one row per point");
  }
  std::vector<Tensor> parts;
  if (variant != CriticVariant::kUninformed) {
    if (!side_per_task.defined() || side_per_task.cols() == 0) {
      throw ConfigError("critic_inputs: " + to_string(variant) + "-informed critic needs " +
                        (variant == CriticVariant::kKnowledge ? "task knowledge" : "the context posterior"));
    }
    parts.push_back(ops::gather_rows(side_per_task, task));
  }
  parts.push_back(r);
  parts.push_back(Tensor::constant(y));
  parts.push_back(Tensor::constant(z));
  return ops::concat_cols(parts);
}

struct PenaltyValue {
  Tensor value;
  std::size_t clamped = 0;
};

class Critic {
 public:
  Critic() = default;

  /// `input_dim` counts every column including z.
  Critic(CriticConfig cfg, int input_dim, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    net_ = Mlp(MlpSpec{input_dim, cfg_.hidden, 1, cfg_.activation, OutputHead::kLinear}, rng);
  }

  const CriticConfig& config() const { return cfg_; }
  int input_dim() const { return net_.spec().input_dim; }

  Tensor logits(const Tensor& rows) const { return net_.forward(rows); }

  /// Probability that each row came from the joint.
  Matrix probability(const Matrix& rows) const {
    NoGradGuard guard;
    return logits(Tensor::constant(rows)).value().unaryExpr([](double t) { return ops::sigmoid(t); });
  }

  /// Logistic loss with real rows labelled 1 and fake rows labelled 0.
  Tensor loss(const CriticBatch& batch) const {
    const Index n = batch.real.rows(), m = batch.fake.rows();
    Matrix rows(n + m, batch.real.cols());
    rows.topRows(n) = batch.real;
    rows.bottomRows(m) = batch.fake;
    Matrix labels(n + m, 1);
    labels.topRows(n).setOnes();
    labels.bottomRows(m).setZero();
    return ops::mean(ops::bce_with_logits(logits(Tensor::constant(rows)), labels));
  }

  /// Weighted mean over real rows of log(D / (1 - D)) or D / (1 - D), with D
  /// clamped to [1e-6, 1 - 1e-6]. Gradients reach the rows, not phi, as long as
  /// the caller only steps the predictive parameters.
  PenaltyValue penalty(const Tensor& real_rows, std::span<const double> weight) const {
    if (static_cast<Index>(weight.size()) != real_rows.rows()) throw ConfigError("penalty: one weight per row required");
    const double bound = std::log((1.0 - kCriticClamp) / kCriticClamp);
    const Tensor l = logits(real_rows);
    PenaltyValue out;
    for (Index i = 0; i < l.rows(); ++i) out.clamped += std::abs(l.value()(i, 0)) > bound ? 1 : 0;
    Tensor per_row = ops::clamp(l, -bound, bound);
    if (cfg_.mi_form == MiForm::kRatio) per_row = ops::exp(per_row);
    std::vector<Index> one(weight.size(), 0);
    out.value = ops::segment_reduce(per_row, one, weight, 1, true);
    return out;
  }

  /// The same estimate on constant rows (unit weights), for diagnostics.
  double estimate(const Matrix& real_rows) const {
    NoGradGuard guard;
    std::vector<double> w(static_cast<std::size_t>(real_rows.rows()), 1.0);
    return penalty(Tensor::constant(real_rows), w).value.item();
  }

  std::vector<Tensor> parameters() const { return net_.parameters(); }
  std::vector<std::pair<std::string, Tensor>> named_parameters() const { return net_.named_parameters("critic"); }
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (auto& [name, t] : named_parameters()) out.push_back(name);
    return out;
  }
  Mlp& network() { return net_; }

  Critic clone() const {
    Critic c;
    c.cfg_ = cfg_;
    c.net_ = net_.clone();
    return c;
  }

 private:
  CriticConfig cfg_;
  Mlp net_;
};

/// Draws `rows` real rows from `pool` with probability proportional to
/// `weight`, builds the shuffled-z fakes and takes one Adam step on phi.
/// Returns the critic loss before the step.
inline double critic_update(Critic& critic, AdamState& adam, Rng& rng, const Matrix& pool, std::span<const double> weight,
                            int rows) {
  if (pool.rows() < 1) throw UsageError("critic_update: empty pool");
  std::vector<double> cumulative(weight.size());
  double total = 0.0;
  for (std::size_t i = 0; i < weight.size(); ++i) cumulative[i] = (total += weight[i]);
  if (!(total > 0.0)) throw DomainError("critic_update: all row weights are zero");
  Matrix real(rows, pool.cols());
  for (Index i = 0; i < rows; ++i) {
    const double u = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), weight.size() - 1);
    real.row(i) = pool.row(static_cast<Index>(k));
  }
  const auto batch = make_marginal_batch(rng, real);
  auto params = critic.parameters();
  const Tensor loss = critic.loss(batch);
  backward(loss, params);
  const auto names = critic.parameter_names();
  adam_step(adam, params, names);
  return loss.item();
}

}  // namespace rime
