#pragma once

// Experiment presets, k-shot evaluation, worst-case risk and report emission
// (aligned text tables, flat CSV, SVG plots, run manifests).
//
// Evaluation tasks depend only on (experiment, seed, environment) and the
// latent noise only on (seed, environment, k), so every method in a seed is
// scored on the same tasks with the same noise. Contexts are nested: the
// k-shot context is the first k points of a 100-point pool drawn alongside,
// and disjoint from, the 1000 targets.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "rime/trainer.hpp"

#ifndef RIME_BUILD_DESCRIBE
#define RIME_BUILD_DESCRIBE "unknown"
#endif

namespace rime {

/// `git describe` of the build, stamped into manifests.
inline std::string build_describe() { return RIME_BUILD_DESCRIBE; }

// ---------------------------------------------------------------------------
// Methods

struct MethodSpec {
  std::string label;
  ModelVariant variant = ModelVariant::kNP;
  bool rime = false;
  CriticVariant critic = CriticVariant::kUninformed;
  Representation representation = Representation::kLearned;

  bool knowledge() const { return variant == ModelVariant::kINP; }

  /// Stable identifier: np, inp, or rime-<knowledge>-<critic>-<representation>.
  std::string id() const {
    if (!rime) return to_string(variant);
    return std::string("rime-") + (knowledge() ? "k" : "nok") + "-" + to_string(critic) + "-" + to_string(representation);
  }

  bool operator==(const MethodSpec& o) const { return id() == o.id(); }
};

inline std::string method_label(bool rime, bool knowledge, CriticVariant critic, Representation rep, bool multitask) {
  if (!rime) return knowledge ? "Informed Neural Process (knowledge of b)" : (multitask ? "Neural Process (no knowledge)" : "Neural Process");
  if (!multitask) return rep == Representation::kOptimal ? "RIME (opt. rep)" : "RIME";
  std::string s = "RIME (";
  if (rep == Representation::kOptimal) s += "opt. rep, ";
  s += knowledge ? "knowledge of b, " : "no knowledge, ";
  s += critic == CriticVariant::kUninformed ? "uninformed critic)" : to_string(critic) + "-informed critic)";
  return s;
}

inline MethodSpec make_method(bool rime, bool knowledge, CriticVariant critic, Representation rep, bool multitask) {
  MethodSpec m;
  m.rime = rime;
  m.variant = knowledge ? ModelVariant::kINP : ModelVariant::kNP;
  m.critic = rime ? critic : CriticVariant::kUninformed;
  m.representation = rime ? rep : Representation::kLearned;
  m.label = method_label(rime, knowledge, m.critic, m.representation, multitask);
  return m;
}

/// Inverse of MethodSpec::id().
inline MethodSpec parse_method_id(const std::string& id, bool multitask) {
  if (id == "np") return make_method(false, false, CriticVariant::kUninformed, Representation::kLearned, multitask);
  if (id == "inp") return make_method(false, true, CriticVariant::kUninformed, Representation::kLearned, multitask);
  std::vector<std::string> parts;
  std::stringstream ss(id);
  for (std::string p; std::getline(ss, p, '-');) parts.push_back(p);
  if (parts.size() != 4 || parts[0] != "rime" || (parts[1] != "k" && parts[1] != "nok")) {
    throw ConfigError("unknown method id '" + id + "'");
  }
  return make_method(true, parts[1] == "k", parse_critic_variant(parts[2]), parse_representation(parts[3]), multitask);
}

// ---------------------------------------------------------------------------
// Presets

struct EvalConfig {
  std::size_t tasks = 32;
  std::size_t targets = 1000;
  std::size_t context_pool = 100;
  int latent_samples = 16;
  /// Report the mean over target points instead of the sum.
  bool per_point = false;
};

struct ExperimentPreset {
  std::string name;
  bool fast = false;
  std::vector<MethodSpec> methods;
  std::vector<double> eval_envs{0.5, -0.9};
  std::vector<std::size_t> k_grid{3, 5, 10, 20, 50, 100};
  std::vector<std::uint64_t> seeds;
  /// Shared training settings; method-specific fields are filled per run.
  TrainJob base;
  EvalConfig eval;

  bool multitask() const { return base.generator.multitask; }
};

/// exp1 (single task, b = 0) or exp2 (b ~ U[-2, 2], knowledge of b).
/// Architecture and optimiser settings are local choices, tuned on exp2.
inline ExperimentPreset make_preset(const std::string& name, bool fast) {
  ExperimentPreset p;
  p.name = name;
  p.fast = fast;
  TrainJob& j = p.base;
  j.model.hidden = {32, 32};
  j.model.embed_dim = 32;
  j.model.d_c = 8;
  j.model.d_r = 4;
  // A critic wider and faster than the predictor keeps the adversarial
  // estimate close to the true dependence between updates.
  j.critic.hidden = {64, 64};
  j.critic.lr = 3e-3;
  j.train.lambda = 5000.0;
  j.train.steps = fast ? 2000 : 4000;
  j.train.eval_interval = 100;
  const std::size_t n_seeds = fast ? 3 : 10;
  for (std::uint64_t s = 0; s < n_seeds; ++s) p.seeds.push_back(s);

  using CV = CriticVariant;
  using R = Representation;
  if (name == "exp1") {
    j.generator.multitask = false;
    p.methods = {make_method(false, false, CV::kUninformed, R::kLearned, false),
                 make_method(true, false, CV::kUninformed, R::kOptimal, false),
                 make_method(true, false, CV::kUninformed, R::kLearned, false)};
  } else if (name == "exp2") {
    j.generator.multitask = true;
    p.methods = {make_method(false, false, CV::kUninformed, R::kLearned, true),
                 make_method(false, true, CV::kUninformed, R::kLearned, true),
                 make_method(true, false, CV::kUninformed, R::kOptimal, true),
                 make_method(true, true, CV::kUninformed, R::kOptimal, true),
                 make_method(true, true, CV::kContext, R::kOptimal, true),
                 make_method(true, false, CV::kUninformed, R::kLearned, true),
                 make_method(true, true, CV::kUninformed, R::kLearned, true),
                 make_method(true, true, CV::kKnowledge, R::kLearned, true),
                 make_method(true, true, CV::kContext, R::kLearned, true)};
  } else {
    throw UsageError("unknown experiment '" + name + "' (expected exp1 or exp2)");
  }
  return p;
}

/// The training job for one (method, seed) cell.
inline TrainJob make_job(const ExperimentPreset& p, const MethodSpec& m, std::uint64_t seed) {
  TrainJob j = p.base;
  j.model.variant = m.variant;
  j.model.d_k = m.knowledge() ? 1 : 0;
  j.model.representation = m.representation;
  j.critic.variant = m.critic;
  j.train.seed = seed;
  if (!m.rime) {
    j.train.lambda = 0.0;
    j.train.weighting = Weighting::kUniform;
  } else {
    j.train.weighting = Weighting::kEstimated;
  }
  return j;
}

inline std::uint64_t config_digest(const TrainJob& j) { return digest(train_job_json(j).dump()); }

// ---------------------------------------------------------------------------
// Flat key=value configuration with [sections].

using ConfigSection = std::map<std::string, std::string>;
using ConfigFile = std::map<std::string, ConfigSection>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Keys before any [section] header land in section "".
inline ConfigFile parse_config_text(const std::string& text) {
  ConfigFile out;
  std::string section;
  std::istringstream in(text);
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(n) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      out[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key");
    if (out[section].count(key)) throw ConfigError("config line " + std::to_string(n) + ": duplicate key '" + key + "'");
    out[section][key] = trim(line.substr(eq + 1));
  }
  return out;
}

inline ConfigFile read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config file not found: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

namespace detail_harness {

inline std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  for (std::string p; std::getline(ss, p, ',');) out.push_back(std::stoi(trim(p)));
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

}  // namespace detail_harness

/// Applies one config section to a preset. Unknown keys are rejected.
inline void apply_config(ExperimentPreset& p, const ConfigSection& section) {
  using namespace detail_harness;
  auto& j = p.base;
  for (const auto& [key, value] : section) {
    try {
      if (key == "steps") j.train.steps = std::stol(value);
      else if (key == "lr") j.train.lr = std::stod(value);
      else if (key == "beta") j.train.beta = std::stod(value);
      else if (key == "lambda") j.train.lambda = std::stod(value);
      else if (key == "meta_batch") j.train.meta_batch = std::stoi(value);
      else if (key == "eval_interval") j.train.eval_interval = std::stol(value);
      else if (key == "warmup") j.train.warmup = std::stoi(value);
      else if (key == "pool_tasks") j.train.pool_tasks = std::stoul(value);
      else if (key == "validation_fraction") j.train.validation_fraction = std::stod(value);
      else if (key == "validation_samples") j.train.validation_samples = std::stoi(value);
      else if (key == "upsample") j.train.upsample = std::stoul(value);
      else if (key == "folds") j.train.folds = std::stoi(value);
      else if (key == "hidden") j.model.hidden = parse_int_list(value);
      else if (key == "embed_dim") j.model.embed_dim = std::stoi(value);
      else if (key == "d_c") j.model.d_c = std::stoi(value);
      else if (key == "d_r") j.model.d_r = std::stoi(value);
      else if (key == "critic_hidden") j.critic.hidden = parse_int_list(value);
      else if (key == "critic_lr") j.critic.lr = std::stod(value);
      else if (key == "critic_batch") j.critic.batch_rows = std::stoi(value);
      else if (key == "critic_updates") j.critic.updates_per_step = std::stoi(value);
      else if (key == "mi_form") j.critic.mi_form = parse_mi_form(value);
      else if (key == "weight_epochs") j.weight_model.epochs = std::stoi(value);
      else if (key == "seeds") {
        p.seeds.clear();
        for (int s = 0; s < std::stoi(value); ++s) p.seeds.push_back(static_cast<std::uint64_t>(s));
      } else if (key == "eval_tasks") p.eval.tasks = std::stoul(value);
      else if (key == "latent_samples") p.eval.latent_samples = std::stoi(value);
      else if (key == "per_point") p.eval.per_point = parse_bool(value);
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
    } catch (const std::out_of_range&) {
      throw ConfigError("config key '" + key + "': value out of range '" + value + "'");
    }
  }
}

/// Every setting of a preset, echoed into manifests.
inline nlohmann::json preset_json(const ExperimentPreset& p) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : p.methods) methods.push_back(m.id());
  return {{"experiment", p.name},
          {"fast", p.fast},
          {"methods", methods},
          {"eval_envs", p.eval_envs},
          {"k_grid", p.k_grid},
          {"seeds", p.seeds},
          {"base_job", train_job_json(p.base)},
          {"eval",
           {{"tasks", p.eval.tasks},
            {"targets", p.eval.targets},
            {"context_pool", p.eval.context_pool},
            {"latent_samples", p.eval.latent_samples},
            {"per_point", p.eval.per_point}}}};
}

// ---------------------------------------------------------------------------
// Evaluation

/// Fresh evaluation tasks in one environment; each holds context_pool
/// context candidates followed by `targets` target points.
struct EvalSet {
  double e = 0.0;
  std::uint64_t seed = 0;
  std::vector<TaskDataset> tasks;
};

inline std::uint64_t env_label(double e) { return static_cast<std::uint64_t>(std::llround((e + 10.0) * 1000.0)); }

inline EvalSet make_eval_set(const GeneratorConfig& gen, double e, const EvalConfig& cfg, std::uint64_t seed) {
  EvalSet s;
  s.e = e;
  s.seed = seed;
  Rng rng(derive_seed(seed, {0x6576616c, env_label(e), gen.multitask ? 2u : 1u}));  // "eval"
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    const auto params = sample_task_params(rng, static_cast<int>(100000 + t), gen);
    s.tasks.push_back(sample_task(rng, {e}, params, cfg.context_pool + cfg.targets, gen));
  }
  return s;
}

struct KShotResult {
  double mean = 0.0;
  double se = 0.0;
  std::vector<double> per_task;
};

/// k-shot loss: the first k pool points are the context, the targets are
/// scored with the summed (or per-point mean) Gaussian NLL, averaged over
/// latent samples and tasks. No weights are applied at evaluation.
inline KShotResult evaluate_kshot(const NpModel& model, const EvalSet& set, std::size_t k, const EvalConfig& cfg) {
  if (k > 100 || k > cfg.context_pool) {
    throw UsageError("evaluate_kshot: k = " + std::to_string(k) + " outside [0, " +
                     std::to_string(std::min<std::size_t>(100, cfg.context_pool)) + "]");
  }
  if (set.tasks.empty()) throw UsageError("evaluate_kshot: empty evaluation set");
  const int d_k = model.config().d_k;
  PointSetBuilder builder(d_k);
  for (const auto& t : set.tasks) {
    if (t.size() != cfg.context_pool + cfg.targets) throw UsageError("evaluate_kshot: task size does not match EvalConfig");
    std::vector<double> tc(t.size(), 0.0), cc(t.size(), 0.0);
    for (std::size_t i = 0; i < k; ++i) cc[i] = 1.0;
    for (std::size_t i = cfg.context_pool; i < t.size(); ++i) tc[i] = 1.0;
    builder.add_task(t.samples, tc, cc, d_k > 0 ? t.knowledge : std::vector<double>{});
  }
  const auto ps = builder.build();
  Rng noise(derive_seed(set.seed, {0x6e6f6973, env_label(set.e), k}));  // "nois"
  KShotResult r;
  r.per_task = model.predictive_loss(ps, noise, cfg.latent_samples);
  if (cfg.per_point)
    for (double& v : r.per_task) v /= static_cast<double>(cfg.targets);
  r.mean = sample_mean(r.per_task);
  r.se = r.per_task.size() > 1 ? standard_error(r.per_task) : 0.0;
  return r;
}

/// Diagnostic: summed Bernoulli cross entropy of the Bayes classifier on the
/// optimal representation, p(y | x1 + x2, b). Under the nuisance-randomized
/// distribution r = x1 + x2 is N(2b + 6y, var1 + var2) whatever e is, so this
/// loss has the same expectation in every environment.
inline double bayes_oracle_loss(const EvalSet& set, const GeneratorConfig& gen, const EvalConfig& cfg) {
  if (set.tasks.empty()) throw UsageError("bayes_oracle_loss: empty evaluation set");
  const double var = gen.x1_sd() * gen.x1_sd() + gen.x2_sd() * gen.x2_sd();
  std::vector<double> per_task;
  for (const auto& t : set.tasks) {
    const double b = t.task.b.value_or(0.0);
    double total = 0.0;
    for (std::size_t i = cfg.context_pool; i < t.size(); ++i) {
      const auto& s = t.samples[i];
      const double r = optimal_representation(s.x) - 2.0 * b;
      const double logit = (6.0 * r - 18.0) / var;  // log N(r; 6, var) - log N(r; 0, var)
      const double signed_logit = s.y == 1 ? logit : -logit;
      total += std::max(-signed_logit, 0.0) + std::log1p(std::exp(-std::abs(signed_logit)));
    }
    per_task.push_back(cfg.per_point ? total / static_cast<double>(t.size() - cfg.context_pool) : total);
  }
  return sample_mean(per_task);
}

// ---------------------------------------------------------------------------
// Reports

struct RunRecord {
  std::string method;
  std::uint64_t seed = 0;
  double env = 0.0;
  std::size_t k = 0;
  double loss = 0.0;
};

struct RunManifest {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string log_digest;
  std::string checkpoint;
  std::string build = build_describe();
  long best_step = 0;
  double best_validation = 0.0;
};

struct CellStats {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double se = 0.0;
  std::vector<double> values;
  bool complete = false;
};

struct EvalReport {
  std::string experiment;
  bool multitask = false;
  std::vector<MethodSpec> methods;
  std::vector<double> envs;
  std::vector<std::size_t> ks;
  std::vector<std::uint64_t> seeds;
  std::vector<RunRecord> records;
  std::vector<RunManifest> manifests;
  /// env -> Bayes oracle loss on the optimal representation (diagnostic).
  std::map<double, double> oracle;

  std::optional<double> value(const std::string& method, double env, std::size_t k, std::uint64_t seed) const {
    for (const auto& r : records)
      if (r.method == method && r.env == env && r.k == k && r.seed == seed) return r.loss;
    return std::nullopt;
  }

  /// Mean over seeds of the per-seed losses.
  CellStats cell(const std::string& method, double env, std::size_t k) const {
    CellStats c;
    for (auto s : seeds)
      if (auto v = value(method, env, k, s)) c.values.push_back(*v);
    c.complete = !seeds.empty() && c.values.size() == seeds.size();
    if (!c.values.empty()) {
      c.mean = sample_mean(c.values);
      c.se = c.values.size() > 1 ? standard_error(c.values) : 0.0;
    }
    return c;
  }

  bool complete() const {
    for (const auto& m : methods)
      for (double e : envs)
        for (auto k : ks)
          if (!cell(m.id(), e, k).complete) return false;
    return true;
  }
};

struct RiskSummary {
  std::vector<std::size_t> ks;
  /// method id -> worst (largest) mean loss over environments, per k.
  std::map<std::string, std::vector<double>> risk;
};

/// Finite-environment surrogate for the supremum over environments.
inline RiskSummary worst_case_risk(const EvalReport& report) {
  if (report.envs.empty() || report.methods.empty() || report.ks.empty()) {
    throw UsageError("worst_case_risk: report has no environments, methods or k values");
  }
  RiskSummary out;
  out.ks = report.ks;
  for (const auto& m : report.methods) {
    auto& row = out.risk[m.id()];
    for (auto k : report.ks) {
      double worst = -std::numeric_limits<double>::infinity();
      for (double e : report.envs) {
        const auto c = report.cell(m.id(), e, k);
        worst = c.values.empty() ? std::numeric_limits<double>::quiet_NaN() : std::max(worst, c.mean);
        if (std::isnan(worst)) break;
      }
      row.push_back(worst);
    }
  }
  return out;
}

inline constexpr const char* kCsvHeader = "method,knowledge,critic,representation,env,k,seed,loss";

/// One row per (method, env, k, seed); missing cells are written as NA.
inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  os << std::setprecision(17);
  for (const auto& m : r.methods)
    for (double e : r.envs)
      for (auto k : r.ks)
        for (auto s : r.seeds) {
          os << m.id() << ',' << (m.knowledge() ? "on" : "off") << ','
             << (m.rime ? to_string(m.critic) : "none") << ',' << to_string(m.representation) << ',' << e << ',' << k
             << ',' << s << ',';
          if (auto v = r.value(m.id(), e, k, s)) os << *v;
          else os << "NA";
          os << '\n';
        }
  return os.str();
}

/// Parses a CSV written by report_csv. Methods, environments, k values and
/// seeds are taken in order of first appearance.
inline EvalReport parse_report_csv(const std::string& text, const std::string& experiment) {
  EvalReport r;
  r.experiment = experiment;
  r.multitask = experiment == "exp2";
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kCsvHeader) throw ConfigError("report CSV: missing or wrong header");
  std::set<std::string> seen_methods;
  for (int n = 2; std::getline(in, line); ++n) {
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string p; std::getline(ss, p, ',');) f.push_back(trim(p));
    if (f.size() != 8) throw ConfigError("report CSV line " + std::to_string(n) + ": expected 8 fields");
    if (seen_methods.insert(f[0]).second) r.methods.push_back(parse_method_id(f[0], r.multitask));
    const double e = std::stod(f[4]);
    const auto k = static_cast<std::size_t>(std::stoul(f[5]));
    const auto s = static_cast<std::uint64_t>(std::stoull(f[6]));
    if (std::find(r.envs.begin(), r.envs.end(), e) == r.envs.end()) r.envs.push_back(e);
    if (std::find(r.ks.begin(), r.ks.end(), k) == r.ks.end()) r.ks.push_back(k);
    if (std::find(r.seeds.begin(), r.seeds.end(), s) == r.seeds.end()) r.seeds.push_back(s);
    if (f[7] != "NA") r.records.push_back({f[0], s, e, k, std::stod(f[7])});
  }
  return r;
}

namespace detail_harness {

inline std::string format_value(double v) {
  if (std::isnan(v)) return "--";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

inline std::string pad_left(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }
inline std::string pad_right(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

/// Row groups separated by rules: baselines, then RIME; in the multitask
/// table RIME splits into optimal- and learned-representation blocks.
inline int method_group(const MethodSpec& m, bool multitask) {
  if (!m.rime) return 0;
  if (!multitask) return 1;
  return m.representation == Representation::kOptimal ? 1 : 2;
}

inline std::string env_heading(double e, double train_e) {
  std::ostringstream os;
  os << (e == train_e ? "In-Distribution" : "Out-of-Distribution") << " (e = " << e << ")";
  return os.str();
}

}  // namespace detail_harness

/// Aligned text table with one block per
/// environment, one row per method, one column per context size. Missing
/// cells print as "--".
inline std::string report_table(const EvalReport& r, double train_e = 0.5) {
  using namespace detail_harness;
  std::size_t label_w = std::string("Context set size (# shots)").size();
  for (const auto& m : r.methods) label_w = std::max(label_w, m.label.size());
  const std::size_t col_w = 10;
  const std::size_t total_w = label_w + col_w * r.ks.size();
  const std::string rule(total_w, '-');
  std::ostringstream os;
  os << "Target cross entropy loss: " << (r.multitask ? "Experiment 2 (multitask)" : "Experiment 1 (single task)") << '\n';
  os << std::string(total_w, '=') << '\n';
  for (std::size_t ei = 0; ei < r.envs.size(); ++ei) {
    if (ei > 0) os << rule << '\n';
    os << pad_left(env_heading(r.envs[ei], train_e), total_w) << '\n';
    os << pad_right("Context set size (# shots)", label_w);
    for (auto k : r.ks) os << pad_left(std::to_string(k), col_w);
    os << '\n';
    int group = -1;
    for (const auto& m : r.methods) {
      if (method_group(m, r.multitask) != group) {
        os << rule << '\n';
        group = method_group(m, r.multitask);
      }
      os << pad_right(m.label, label_w);
      for (auto k : r.ks) {
        const auto c = r.cell(m.id(), r.envs[ei], k);
        std::string v = format_value(c.values.empty() ? std::numeric_limits<double>::quiet_NaN() : c.mean);
        if (!c.values.empty() && !c.complete) v += "*";
        os << pad_left(v, col_w);
      }
      os << '\n';
    }
  }
  os << std::string(total_w, '=') << '\n';
  for (double e : r.envs)
    if (r.oracle.count(e)) os << "Bayes oracle on x1 + x2 (e = " << e << "): " << format_value(r.oracle.at(e)) << '\n';
  if (!r.complete()) os << "-- missing cell; * cell backed by fewer than " << r.seeds.size() << " seeds\n";
  return os.str();
}

inline std::string risk_table(const EvalReport& r) {
  using namespace detail_harness;
  const auto risk = worst_case_risk(r);
  std::size_t label_w = std::string("Worst-case risk (# shots)").size();
  for (const auto& m : r.methods) label_w = std::max(label_w, m.label.size());
  std::ostringstream os;
  os << pad_right("Worst-case risk (# shots)", label_w);
  for (auto k : r.ks) os << pad_left(std::to_string(k), 10);
  os << '\n';
  for (const auto& m : r.methods) {
    os << pad_right(m.label, label_w);
    for (double v : risk.risk.at(m.id())) os << pad_left(format_value(v), 10);
    os << '\n';
  }
  return os.str();
}

/// Replaces every value cell by a right-aligned '#' of the same width, so
/// tables can be compared by layout alone.
inline std::string mask_values(const std::string& table) {
  static const std::regex cell(R"(\s+(-?[0-9]+\.[0-9]+|--)\*?(?=\s|$))");
  std::string out;
  auto begin = std::sregex_iterator(table.begin(), table.end(), cell);
  std::size_t last = 0;
  for (auto it = begin; it != std::sregex_iterator(); ++it) {
    const auto pos = static_cast<std::size_t>(it->position());
    const auto len = static_cast<std::size_t>(it->length());
    out += table.substr(last, pos - last);
    out += std::string(len - 1, ' ') + '#';
    last = pos + len;
  }
  return out + table.substr(last);
}

/// Loss against k for one environment. Non-RIME methods are dotted, RIME
/// methods solid. The y axis is asinh-scaled to show both signs and the
/// wide range of losses.
inline std::string report_svg(const EvalReport& r, double env, double train_e = 0.5) {
  using namespace detail_harness;
  const double W = 760, H = 460, left = 70, right = 330, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  auto fy = [](double v) { return std::asinh(v / 10.0); };
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& m : r.methods)
    for (auto k : r.ks) {
      const auto c = r.cell(m.id(), env, k);
      if (c.values.empty()) continue;
      lo = std::min(lo, fy(c.mean));
      hi = std::max(hi, fy(c.mean));
    }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-9) hi = lo + 1.0;
  const double kmin = std::log(static_cast<double>(std::max<std::size_t>(1, r.ks.empty() ? 1 : r.ks.front())));
  const double kmax = std::log(static_cast<double>(std::max<std::size_t>(2, r.ks.empty() ? 2 : r.ks.back())));
  auto px = [&](std::size_t k) {
    const double lk = std::log(static_cast<double>(std::max<std::size_t>(1, k)));
    return left + (kmax > kmin ? (lk - kmin) / (kmax - kmin) : 0.5) * pw;
  };
  auto py = [&](double v) { return top + (1.0 - (fy(v) - lo) / (hi - lo)) * ph; };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"22\" font-size=\"14\">" << env_heading(env, train_e) << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (auto k : r.ks) {
    os << "<text x=\"" << px(k) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << k << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">context set size (# shots)</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double t = lo + (hi - lo) * i / 4.0;
    const double v = 10.0 * std::sinh(t);
    const double y = top + (1.0 - static_cast<double>(i) / 4.0) * ph;
    os << "<line x1=\"" << left - 4 << "\" y1=\"" << y << "\" x2=\"" << left << "\" y2=\"" << y << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << format_value(v) << "</text>\n";
  }
  std::size_t mi = 0;
  for (const auto& m : r.methods) {
    const char* color = colors[mi % 10];
    const std::string dash = m.rime ? "" : " stroke-dasharray=\"2,4\"";
    std::vector<std::string> segments(1);
    for (auto k : r.ks) {
      const auto c = r.cell(m.id(), env, k);
      if (c.values.empty()) {
        if (!segments.back().empty()) segments.emplace_back();
        os << "<text x=\"" << px(k) << "\" y=\"" << top + ph - 4 << "\" fill=\"" << color << "\" text-anchor=\"middle\">gap</text>\n";
        continue;
      }
      std::ostringstream pt;
      pt << std::fixed << std::setprecision(1) << px(k) << "," << py(c.mean) << " ";
      segments.back() += pt.str();
    }
    for (const auto& s : segments)
      if (!s.empty()) os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"" << dash << " points=\"" << s << "\"/>\n";
    const double ly = top + 14.0 + 18.0 * static_cast<double>(mi);
    os << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 40 << "\" y2=\"" << ly - 4
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"" << dash << "/>\n";
    os << "<text x=\"" << left + pw + 46 << "\" y=\"" << ly << "\" font-size=\"10\">" << m.label << "</text>\n";
    ++mi;
  }
  os << "</svg>\n";
  return os.str();
}

inline nlohmann::json manifest_json(const RunManifest& m) {
  return {{"method", m.method},           {"seed", m.seed},         {"config_digest", m.config_digest},
          {"log_digest", m.log_digest},   {"checkpoint", m.checkpoint}, {"build", m.build}, {"best_step", m.best_step},
          {"best_validation", m.best_validation}};
}

/// Writes table.txt, risk.txt, results.csv, manifests.json and one SVG per
/// environment into `dir`. Returns false when the report has gaps.
inline bool emit_report(const EvalReport& r, const std::string& dir, double train_e = 0.5) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream out(fs::path(dir) / name);
    if (!out) throw UsageError("cannot write " + (fs::path(dir) / name).string());
    out << text;
  };
  write("results.csv", report_csv(r));
  if (!r.methods.empty() && !r.envs.empty() && !r.ks.empty()) {
    write("table.txt", report_table(r, train_e));
    write("risk.txt", risk_table(r));
    for (double e : r.envs) {
      std::ostringstream name;
      name << "loss_vs_k_e" << e << ".svg";
      write(name.str(), report_svg(r, e, train_e));
    }
  }
  nlohmann::json manifests = nlohmann::json::array();
  for (const auto& m : r.manifests) manifests.push_back(manifest_json(m));
  write("manifests.json", manifests.dump(2) + "\n");
  if (!r.oracle.empty()) {
    nlohmann::json oracle = nlohmann::json::array();
    for (const auto& [e, v] : r.oracle) oracle.push_back({{"env", e}, {"loss", v}});
    write("oracle.json", oracle.dump(2) + "\n");
  }
  return r.complete();
}

// ---------------------------------------------------------------------------
// Pipeline

struct ExperimentOptions {
  std::string out_dir;  // empty: keep everything in memory
  int jobs = 1;
  std::function<void(const std::string&)> progress;
};

struct ExperimentResult {
  EvalReport report;
  /// Per-run data-access ledgers, keyed by "<method>/seed<k>".
  std::map<std::string, DataAccessLog> access;
  std::map<std::string, TrainResult> runs;
};

/// Trains and scores one (method, seed) cell against the seed's eval sets.
inline std::vector<RunRecord> evaluate_run(const ExperimentPreset& p, const MethodSpec& m, std::uint64_t seed,
                                           const NpModel& model, const std::vector<EvalSet>& sets,
                                           DataAccessLog* access = nullptr) {
  std::vector<RunRecord> out;
  for (const auto& set : sets) {
    std::ostringstream name;
    name << "eval_e" << set.e;
    if (access) access->record("eval", name.str());
    for (auto k : p.k_grid) out.push_back({m.id(), seed, set.e, k, evaluate_kshot(model, set, k, p.eval).mean});
  }
  return out;
}

/// Runs the full method x seed matrix. Training data (and stage-1 weights)
/// are shared by every method of a seed; evaluation sets likewise.
inline ExperimentResult run_experiment(const ExperimentPreset& p, const ExperimentOptions& opt = {}) {
  namespace fs = std::filesystem;
  ExperimentResult res;
  auto& r = res.report;
  r.experiment = p.name;
  r.multitask = p.multitask();
  r.methods = p.methods;
  r.envs = p.eval_envs;
  r.ks = p.k_grid;
  r.seeds = p.seeds;

  struct Cell {
    MethodSpec method;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (auto s : p.seeds)
    for (const auto& m : p.methods) cells.push_back({m, s});

  std::map<std::pair<std::uint64_t, int>, TrainingData> data;
  std::map<std::uint64_t, std::vector<EvalSet>> eval_sets;
  std::map<std::pair<std::uint64_t, int>, std::string> stage1_reports;
  for (auto s : p.seeds) {
    for (const auto& m : p.methods) {
      const auto job = make_job(p, m, s);
      const auto key = std::make_pair(s, static_cast<int>(job.train.weighting));
      if (!data.count(key)) {
        if (opt.progress) opt.progress("stage 1: seed " + std::to_string(s) + " (" + to_string(job.train.weighting) + " weights)");
        data.emplace(key, prepare_training_data(job));
        if (!data.at(key).tables.empty()) stage1_reports[key] = stage1_report(data.at(key).tables).dump(2);
      }
    }
  }

  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= cells.size() || failure) return;
        i = next++;
      }
      const auto& [m, s] = cells[i];
      try {
        const auto job = make_job(p, m, s);
        const std::string key = m.id() + "/seed" + std::to_string(s);
        DataAccessLog access;
        access.record("stage1", "train_pool");
        const auto& d = data.at({s, static_cast<int>(job.train.weighting)});
        std::string run_dir;
        std::optional<RunLog> file_log;
        if (!opt.out_dir.empty()) {
          run_dir = (fs::path(opt.out_dir) / "runs" / m.id() / ("seed" + std::to_string(s))).string();
          fs::create_directories(run_dir);
          file_log.emplace((fs::path(run_dir) / "log.jsonl").string());
        }
        RunLog mem_log;
        RunLog& log = file_log ? *file_log : mem_log;
        if (opt.progress) {
          std::lock_guard<std::mutex> lock(mu);
          opt.progress("train " + key);
        }
        Stage2Trainer trainer(job, d);
        Stage2Options so;
        so.log_every = 10;
        if (!run_dir.empty()) so.dump_path = (fs::path(run_dir) / "halt_dump.json").string();
        auto tr = run_stage2(trainer, log, so, &access);

        std::vector<EvalSet> sets;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (!eval_sets.count(s)) {
            for (double e : p.eval_envs) eval_sets[s].push_back(make_eval_set(job.generator, e, p.eval, s));
          }
          sets = eval_sets.at(s);
        }
        const auto records = evaluate_run(p, m, s, tr.best_model, sets, &access);

        RunManifest man;
        man.method = m.id();
        man.seed = s;
        man.config_digest = hex_digest(config_digest(job));
        man.log_digest = hex_digest(tr.log_digest);
        man.best_step = tr.best.step;
        man.best_validation = tr.best.loss;
        if (!run_dir.empty()) {
          man.checkpoint = (fs::path(run_dir) / "checkpoint.json").string();
          save_checkpoint(man.checkpoint, tr.best_model, tr.best.step, {{"method", m.id()}, {"seed", s}});
          std::ofstream mf(fs::path(run_dir) / "manifest.json");
          auto mj = manifest_json(man);
          mj["job"] = train_job_json(job);
          mj["preset"] = preset_json(p);
          mf << mj.dump(2) << '\n';
        } else {
          man.checkpoint = "memory:" + key + "@" + std::to_string(tr.best.step);
        }
        std::lock_guard<std::mutex> lock(mu);
        r.records.insert(r.records.end(), records.begin(), records.end());
        r.manifests.push_back(man);
        res.access[key] = std::move(access);
        res.runs.emplace(key, std::move(tr));
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int jobs = std::max(1, opt.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  for (std::size_t i = 0; i < p.eval_envs.size(); ++i) {
    std::vector<double> v;
    for (auto& [s, sets] : eval_sets) v.push_back(bayes_oracle_loss(sets[i], p.base.generator, p.eval));
    if (!v.empty()) r.oracle[p.eval_envs[i]] = sample_mean(v);
  }

  // Deterministic record order regardless of scheduling.
  auto order = [&](const std::string& id) {
    for (std::size_t i = 0; i < p.methods.size(); ++i)
      if (p.methods[i].id() == id) return i;
    return p.methods.size();
  };
  std::sort(r.records.begin(), r.records.end(), [&](const RunRecord& a, const RunRecord& b) {
    return std::tuple(order(a.method), a.seed, a.env, a.k) < std::tuple(order(b.method), b.seed, b.env, b.k);
  });
  std::sort(r.manifests.begin(), r.manifests.end(), [&](const RunManifest& a, const RunManifest& b) {
    return std::tuple(order(a.method), a.seed) < std::tuple(order(b.method), b.seed);
  });

  if (!opt.out_dir.empty()) {
    for (const auto& [key, text] : stage1_reports) {
      std::ofstream out(fs::path(opt.out_dir) / ("stage1_seed" + std::to_string(key.first) + ".json"));
      out << text << '\n';
    }
    std::ofstream pj(fs::path(opt.out_dir) / "preset.json");
    pj << preset_json(p).dump(2) << '\n';
  }
  return res;
}

}  // namespace rime
