#pragma once

// Stage 1: nuisance-randomisation weights w = p(y) / p(y | z), estimated with a
// k-fold cross-fitted classifier so that no weight is produced by a model that
// saw its own sample, then multinomial upsampling of each task by the weights.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rime/datagen.hpp"
#include "rime/numcore.hpp"

namespace rime {

struct WeightModelConfig {
  MlpSpec classifier{1, {8}, 1, Activation::kTanh, OutputHead::kLinear};
  int folds = 5;
  int epochs = 250;
  double lr = 0.03;
  double clamp_low = 0.1;
  double clamp_high = 10.0;
  /// One weight model over all tasks (true) or one per task.
  bool pooled = true;
};

/// Classifier for q(y = 1 | z) plus the training-fold estimate of p(y = 1).
struct WeightModelParams {
  Mlp classifier;
  double marginal = 0.5;

  double prob_y1(double z) const {
    NoGradGuard guard;
    const double logit = classifier.forward(Tensor::constant(Matrix::Constant(1, 1, z))).item();
    return ops::sigmoid(logit);
  }
};

struct WeightTable {
  std::vector<double> weights;
  std::vector<int> fold;
  std::vector<double> fold_accuracy;
  std::size_t clamped = 0;
  bool restratified = false;
  int folds = 0;

  /// Indices used to train the model that produced the weights of `fold_id`.
  std::vector<std::size_t> training_indices(int fold_id) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold.size(); ++i)
      if (fold[i] != fold_id) out.push_back(i);
    return out;
  }
};

namespace detail_reweigh {

inline bool folds_degenerate(std::span<const int> fold, std::span<const Sample> data, int folds) {
  for (int f = 0; f < folds; ++f) {
    bool has0 = false, has1 = false, held = false;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (fold[i] == f) {
        held = true;
        continue;
      }
      (data[i].y == 1 ? has1 : has0) = true;
    }
    if (!held || !has0 || !has1) return true;
  }
  return false;
}

}  // namespace detail_reweigh

/// Trains q(y | z) on `train` by full-batch Adam on the logistic loss.
inline WeightModelParams fit_weight_model(Rng& rng, std::span<const Sample> data, std::span<const std::size_t> train,
                                          const WeightModelConfig& cfg) {
  WeightModelParams model{Mlp(cfg.classifier, rng), 0.5};
  Matrix z(static_cast<Index>(train.size()), 1), y(static_cast<Index>(train.size()), 1);
  double ones = 0.0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    z(static_cast<Index>(i), 0) = data[train[i]].z;
    y(static_cast<Index>(i), 0) = data[train[i]].y;
    ones += data[train[i]].y;
  }
  model.marginal = ones / static_cast<double>(train.size());
  auto params = model.classifier.parameters();
  AdamState adam = make_adam(params, cfg.lr);
  const Tensor input = Tensor::constant(z);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tensor loss = ops::mean(ops::bce_with_logits(model.classifier.forward(input), y));
    backward(loss, params);
    adam_step(adam, params);
  }
  return model;
}

/// Cross-fitted weights p(y) / q(y | z) for every sample, clamped to
/// [clamp_low, clamp_high] and then rescaled to mean 1.
inline WeightTable fit_weights_kfold(Rng& rng, std::span<const Sample> data, const WeightModelConfig& cfg) {
  if (cfg.folds < 2) throw UsageError("fit_weights_kfold: folds must be >= 2");
  if (data.empty()) throw UsageError("fit_weights_kfold: no data");
  const int folds = cfg.folds;
  WeightTable table;
  table.folds = folds;
  table.fold.resize(data.size());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  for (std::size_t i = 0; i < order.size(); ++i) table.fold[order[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));

  if (detail_reweigh::folds_degenerate(table.fold, data, folds)) {
    // Stratify: deal each class round-robin across folds.
    table.restratified = true;
    std::array<std::size_t, 2> next{0, 0};
    for (std::size_t i : order) {
      const int y = data[i].y;
      table.fold[i] = static_cast<int>(next[static_cast<std::size_t>(y)]++ % static_cast<std::size_t>(folds));
    }
    if (detail_reweigh::folds_degenerate(table.fold, data, folds)) {
      throw DomainError("fit_weights_kfold: cannot form folds whose training splits contain both classes");
    }
  }

  table.weights.assign(data.size(), 1.0);
  for (int f = 0; f < folds; ++f) {
    const auto train = table.training_indices(f);
    Rng fold_rng = rng.split();
    const auto model = fit_weight_model(fold_rng, data, train, cfg);
    std::size_t held = 0, correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (table.fold[i] != f) continue;
      const double q1 = model.prob_y1(data[i].z);
      const double py = data[i].y == 1 ? model.marginal : 1.0 - model.marginal;
      const double qy = data[i].y == 1 ? q1 : 1.0 - q1;
      double w = py / std::max(qy, 1e-12);
      if (w < cfg.clamp_low || w > cfg.clamp_high) ++table.clamped;
      table.weights[i] = std::clamp(w, cfg.clamp_low, cfg.clamp_high);
      ++held;
      correct += ((q1 >= 0.5) == (data[i].y == 1)) ? 1 : 0;
    }
    table.fold_accuracy.push_back(held ? static_cast<double>(correct) / static_cast<double>(held) : 0.0);
  }
  const double mean = std::accumulate(table.weights.begin(), table.weights.end(), 0.0) / static_cast<double>(data.size());
  for (double& w : table.weights) w /= mean;
  return table;
}

/// Draws factor * n samples with replacement, P(sample i) proportional to weights[i].
inline TaskDataset upsample_by_weights(Rng& rng, const TaskDataset& task, std::span<const double> weights,
                                       std::size_t factor) {
  if (factor < 1) throw UsageError("upsample_by_weights: factor must be >= 1");
  if (weights.size() != task.size()) throw UsageError("upsample_by_weights: one weight per sample required");
  std::vector<double> cumulative(weights.size());
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] >= 0.0) || !std::isfinite(weights[i])) throw DomainError("upsample_by_weights: invalid weight");
    total += weights[i];
    cumulative[i] = total;
  }
  if (!(total > 0.0)) throw DomainError("upsample_by_weights: all weights are zero");
  TaskDataset out;
  out.task = task.task;
  out.env = task.env;
  out.knowledge = task.knowledge;
  const std::size_t n = factor * task.size();
  out.samples.reserve(n);
  out.source_index.reserve(n);
  out.weights.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double u = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    std::size_t i = static_cast<std::size_t>(it - cumulative.begin());
    if (i >= task.size()) i = task.size() - 1;
    while (weights[i] == 0.0 && i > 0) --i;  // u landed exactly on a boundary
    out.samples.push_back(task.samples[i]);
    out.source_index.push_back(i);
    out.weights.push_back(weights[i]);
  }
  return out;
}

struct IndependenceDiagnostics {
  double abs_corr = 0.0;
  double binned_mi = 0.0;
  std::size_t n = 0;
};

/// |corr(y, z)| and a binned estimate of I[y; z] over the given samples.
inline IndependenceDiagnostics reweighted_independence_check(std::span<const Sample> samples) {
  std::vector<double> y, z;
  std::vector<int> labels;
  for (const auto& s : samples) {
    y.push_back(s.y);
    z.push_back(s.z);
    labels.push_back(s.y);
  }
  IndependenceDiagnostics d;
  d.n = samples.size();
  if (samples.size() < 2) return d;
  d.abs_corr = std::abs(pearson_correlation(y, z));
  d.binned_mi = binned_mi_discrete(labels, 2, z, 10);
  return d;
}

inline std::vector<Sample> pool_samples(std::span<const TaskDataset> tasks) {
  std::vector<Sample> out;
  for (const auto& t : tasks) out.insert(out.end(), t.samples.begin(), t.samples.end());
  return out;
}

/// Fits weights (pooled over tasks or per task) and writes them into each
/// task's `weights`. Returns one table per fit.
inline std::vector<WeightTable> assign_weights(Rng& rng, std::vector<TaskDataset>& tasks, const WeightModelConfig& cfg) {
  std::vector<WeightTable> tables;
  if (cfg.pooled) {
    const auto pooled = pool_samples(tasks);
    tables.push_back(fit_weights_kfold(rng, pooled, cfg));
    std::size_t offset = 0;
    for (auto& t : tasks) {
      t.weights.assign(tables.back().weights.begin() + static_cast<std::ptrdiff_t>(offset),
                       tables.back().weights.begin() + static_cast<std::ptrdiff_t>(offset + t.size()));
      offset += t.size();
    }
  } else {
    for (auto& t : tasks) {
      tables.push_back(fit_weights_kfold(rng, t.samples, cfg));
      t.weights = tables.back().weights;
    }
  }
  return tables;
}

/// Structured stage-1 report: per-fold held-out accuracy and a weight histogram.
inline nlohmann::json stage1_report(std::span<const WeightTable> tables, std::size_t bins = 20) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& t : tables) {
    const auto [lo_it, hi_it] = std::minmax_element(t.weights.begin(), t.weights.end());
    const double lo = *lo_it, hi = *hi_it;
    std::vector<std::size_t> counts(bins, 0);
    const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
    for (double w : t.weights) {
      auto b = static_cast<std::size_t>((w - lo) / width);
      counts[std::min(b, bins - 1)]++;
    }
    out.push_back({{"folds", t.folds},
                   {"samples", t.weights.size()},
                   {"fold_accuracy", t.fold_accuracy},
                   {"clamped", t.clamped},
                   {"restratified", t.restratified},
                   {"weight_min", lo},
                   {"weight_max", hi},
                   {"histogram", {{"low", lo}, {"width", width}, {"counts", counts}}}});
  }
  return {{"report", "stage1"}, {"fits", out}};
}

inline void write_stage1_report(const std::string& path, std::span<const WeightTable> tables) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write stage-1 report: " + path);
  out << stage1_report(tables).dump(2) << '\n';
}

}  // namespace rime
