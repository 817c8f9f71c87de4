#pragma once

// Nuisance-varying class-conditional Gaussian task families:
//
//   y ~ Bernoulli(1/2),  z | y ~ N(e (2y - 1), 1),
//   x1 ~ N(b + 3y - z, 9),  x2 ~ N(b + 3y + z, 0.01),
//
// with b = 0 for the single-task family and b ~ U[-2, 2] per task otherwise.
// The environment e only moves p(z | y); p(x | y, z, b) is shared.

#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "rime/numcore/errors.hpp"
#include "rime/numcore/rng.hpp"

namespace rime {

struct EnvironmentSpec {
  double e = 0.5;
};

struct TaskParams {
  std::optional<double> b;  // absent for the single-task family
  int task_id = 0;
};

struct Sample {
  std::array<double, 2> x{};
  int y = 0;
  double z = 0.0;
};

enum class KnowledgeMode { kNone, kOffsetB };

struct GeneratorConfig {
  bool multitask = false;
  /// Read the second argument of N(., .) as a variance (true) or a standard deviation.
  bool second_arg_is_variance = true;
  double z_variance = 1.0;
  double x1_scale = 9.0;
  double x2_scale = 0.01;
  double b_low = -2.0;
  double b_high = 2.0;

  double x1_sd() const { return second_arg_is_variance ? std::sqrt(x1_scale) : x1_scale; }
  double x2_sd() const { return second_arg_is_variance ? std::sqrt(x2_scale) : x2_scale; }
};

struct TaskDataset {
  TaskParams task;
  EnvironmentSpec env;
  std::vector<Sample> samples;
  std::vector<double> knowledge;
  /// Stage-1 weight per sample (1 until reweighting).
  std::vector<double> weights;
  /// For an upsampled dataset: index of each sample in the raw task it was drawn from.
  std::vector<std::size_t> source_index;

  std::size_t size() const { return samples.size(); }
  bool upsampled() const { return !source_index.empty(); }
};

inline std::vector<double> extract_knowledge(const TaskParams& task, KnowledgeMode mode) {
  switch (mode) {
    case KnowledgeMode::kNone: return {};
    case KnowledgeMode::kOffsetB:
      if (!task.b) throw UsageError("extract_knowledge: offset_b knowledge needs a multitask task (b is absent)");
      return {*task.b};
  }
  return {};
}

/// Draws task parameters: b ~ U[b_low, b_high] for multitask families.
inline TaskParams sample_task_params(Rng& rng, int task_id, const GeneratorConfig& cfg) {
  TaskParams t;
  t.task_id = task_id;
  if (cfg.multitask) t.b = rng.uniform(cfg.b_low, cfg.b_high);
  return t;
}

inline Sample sample_point(Rng& rng, const EnvironmentSpec& env, double b, const GeneratorConfig& cfg) {
  Sample s;
  s.y = rng.bernoulli(0.5) ? 1 : 0;
  const double sign = 2.0 * s.y - 1.0;
  s.z = rng.normal(env.e * sign, std::sqrt(cfg.z_variance));
  s.x[0] = rng.normal(b + 3.0 * s.y - s.z, cfg.x1_sd());
  s.x[1] = rng.normal(b + 3.0 * s.y + s.z, cfg.x2_sd());
  return s;
}

inline TaskDataset sample_task(Rng& rng, const EnvironmentSpec& env, const TaskParams& task, std::size_t n,
                               const GeneratorConfig& cfg) {
  if (n < 1) throw UsageError("sample_task: n must be >= 1");
  if (cfg.multitask && !task.b) throw UsageError("sample_task: multitask family needs a task offset b");
  TaskDataset out;
  out.task = task;
  if (!cfg.multitask) out.task.b.reset();
  out.env = env;
  const double b = cfg.multitask ? *task.b : 0.0;
  out.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.samples.push_back(sample_point(rng, env, b, cfg));
  out.knowledge = extract_knowledge(out.task, cfg.multitask ? KnowledgeMode::kOffsetB : KnowledgeMode::kNone);
  out.weights.assign(n, 1.0);
  return out;
}

/// x1 + x2: the nuisance cancels, leaving b-shifted 6y plus noise.
inline double optimal_representation(const std::array<double, 2>& x) { return x[0] + x[1]; }

struct Episode {
  std::vector<std::size_t> context;
  std::vector<std::size_t> target;
};

/// Context size drawn uniformly from {min, ..., max} (clipped to the target size).
struct SampledContextSize {
  std::size_t min = 0;
  std::size_t max = 100;
};
using ContextSize = std::variant<std::size_t, SampledContextSize>;

/// Target = every point of the (upsampled) task; context = a subset drawn
/// without replacement from the target indices.
inline Episode make_episode(Rng& rng, const TaskDataset& data, ContextSize size) {
  const std::size_t n = data.size();
  std::size_t m = 0;
  if (const auto* fixed = std::get_if<std::size_t>(&size)) {
    if (*fixed > n) {
      throw UsageError("make_episode: context size " + std::to_string(*fixed) + " exceeds target size " +
                       std::to_string(n));
    }
    m = *fixed;
  } else {
    const auto& range = std::get<SampledContextSize>(size);
    const std::size_t hi = std::min(range.max, n);
    const std::size_t lo = std::min(range.min, hi);
    m = lo + rng.index(hi - lo + 1);
  }
  Episode ep;
  ep.target.resize(n);
  for (std::size_t i = 0; i < n; ++i) ep.target[i] = i;
  std::vector<std::size_t> pool = ep.target;
  for (std::size_t i = 0; i < m; ++i) std::swap(pool[i], pool[i + rng.index(n - i)]);
  ep.context.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(m));
  return ep;
}

// ---------------------------------------------------------------------------
// Line-delimited dataset records. The first line is a manifest; each following
// line is one sample.

struct DatasetFile {
  nlohmann::json manifest;
  std::vector<TaskDataset> tasks;
};

inline nlohmann::json generator_config_json(const GeneratorConfig& cfg) {
  return {{"multitask", cfg.multitask},       {"second_arg_is_variance", cfg.second_arg_is_variance},
          {"z_variance", cfg.z_variance},     {"x1_scale", cfg.x1_scale},
          {"x2_scale", cfg.x2_scale},         {"b_low", cfg.b_low},
          {"b_high", cfg.b_high}};
}

inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig cfg;
  cfg.multitask = j.at("multitask").get<bool>();
  cfg.second_arg_is_variance = j.at("second_arg_is_variance").get<bool>();
  cfg.z_variance = j.at("z_variance").get<double>();
  cfg.x1_scale = j.at("x1_scale").get<double>();
  cfg.x2_scale = j.at("x2_scale").get<double>();
  cfg.b_low = j.at("b_low").get<double>();
  cfg.b_high = j.at("b_high").get<double>();
  return cfg;
}

inline void write_dataset(const std::string& path, const nlohmann::json& manifest,
                          const std::vector<TaskDataset>& tasks) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot open dataset file for writing: " + path);
  nlohmann::json head = manifest;
  head["record"] = "manifest";
  head["format"] = "rime-dataset";
  head["version"] = 1;
  out << head.dump() << '\n';
  for (const auto& t : tasks) {
    for (std::size_t i = 0; i < t.samples.size(); ++i) {
      const auto& s = t.samples[i];
      nlohmann::json rec{{"record", "sample"},
                         {"task_id", t.task.task_id},
                         {"b", t.task.b ? nlohmann::json(*t.task.b) : nlohmann::json(nullptr)},
                         {"e", t.env.e},
                         {"x1", s.x[0]},
                         {"x2", s.x[1]},
                         {"y", s.y},
                         {"z", s.z},
                         {"weight", i < t.weights.size() ? t.weights[i] : 1.0}};
      out << rec.dump() << '\n';
    }
  }
  if (!out) throw UsageError("failed writing dataset file: " + path);
}

/// Reads a record file back. Samples are grouped by (task_id, e) in file order.
inline DatasetFile read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open dataset file: " + path);
  DatasetFile file;
  std::string line;
  if (!std::getline(in, line)) throw UsageError("empty dataset file: " + path);
  file.manifest = nlohmann::json::parse(line);
  if (file.manifest.value("record", "") != "manifest") throw UsageError("dataset file lacks a manifest line: " + path);
  const bool multitask =
      file.manifest.contains("generator") && file.manifest["generator"].value("multitask", false);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    const int id = rec.at("task_id").get<int>();
    const double e = rec.at("e").get<double>();
    if (file.tasks.empty() || file.tasks.back().task.task_id != id || file.tasks.back().env.e != e) {
      TaskDataset t;
      t.task.task_id = id;
      if (!rec.at("b").is_null()) t.task.b = rec.at("b").get<double>();
      t.env.e = e;
      t.knowledge = extract_knowledge(t.task, multitask && t.task.b ? KnowledgeMode::kOffsetB : KnowledgeMode::kNone);
      file.tasks.push_back(std::move(t));
    }
    auto& t = file.tasks.back();
    Sample s;
    s.x = {rec.at("x1").get<double>(), rec.at("x2").get<double>()};
    s.y = rec.at("y").get<int>();
    s.z = rec.at("z").get<double>();
    t.samples.push_back(s);
    t.weights.push_back(rec.at("weight").get<double>());
  }
  return file;
}

}  // namespace rime
