#pragma once

// Neural process over (r(x), y) with optional knowledge conditioning.
//
//   r = r_gamma(x)                 learned MLP, or x1 + x2 in optimal mode
//   h_i = embed(r_i, y_i)          per-point embedding
//   q(C | set, k) = head(mean_i h_i ++ k)   diagonal Gaussian over C
//   p(y | C, r) = dec(C ++ r)      diagonal Gaussian over y
//
// Work is done on a PointSet: the distinct points of a meta-batch with a
// target count and a context count each. An upsampled target set of 1000 rows
// has about 100 distinct points, and every loss below is a count-weighted sum,
// so this is the same arithmetic as running on the expanded rows.

#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rime/datagen.hpp"
#include "rime/numcore.hpp"

namespace rime {

enum class ModelVariant { kNP, kINP };
enum class Representation { kLearned, kOptimal };

inline std::string to_string(ModelVariant v) { return v == ModelVariant::kNP ? "np" : "inp"; }
inline std::string to_string(Representation r) { return r == Representation::kLearned ? "learned" : "optimal"; }

inline ModelVariant parse_variant(const std::string& s) {
  if (s == "np") return ModelVariant::kNP;
  if (s == "inp") return ModelVariant::kINP;
  throw ConfigError("unknown model variant '" + s + "' (expected np or inp)");
}

inline Representation parse_representation(const std::string& s) {
  if (s == "learned") return Representation::kLearned;
  if (s == "optimal") return Representation::kOptimal;
  throw ConfigError("unknown representation '" + s + "' (expected learned or optimal)");
}

struct ModelConfig {
  ModelVariant variant = ModelVariant::kNP;
  Representation representation = Representation::kLearned;
  int d_c = 8;
  int d_r = 4;
  int d_k = 0;
  int embed_dim = 64;
  std::vector<int> hidden{64, 64};
  Activation activation = Activation::kTanh;

  /// Width of r(x): d_r when learned, 1 for x1 + x2.
  int r_dim() const { return representation == Representation::kOptimal ? 1 : d_r; }

  void validate() const {
    if (d_c < 1 || d_r < 1 || embed_dim < 1) throw ConfigError("ModelConfig: d_c, d_r and embed_dim must be >= 1");
    if (d_k < 0) throw ConfigError("ModelConfig: d_k must be >= 0");
    if (variant == ModelVariant::kINP && d_k < 1) throw ConfigError("ModelConfig: variant inp needs d_k >= 1");
    if (variant == ModelVariant::kNP && d_k != 0) throw ConfigError("ModelConfig: variant np takes no knowledge (d_k = 0)");
  }

  MlpSpec representation_spec() const { return {2, hidden, d_r, activation, OutputHead::kLinear}; }
  MlpSpec embedder_spec() const { return {r_dim() + 1, hidden, embed_dim, activation, OutputHead::kLinear}; }
  MlpSpec head_spec() const {
    return {embed_dim + d_k, std::vector<int>(hidden.begin(), hidden.begin() + (hidden.empty() ? 0 : 1)), d_c,
            activation, OutputHead::kGaussian};
  }
  MlpSpec decoder_spec() const { return {d_c + r_dim(), hidden, 1, activation, OutputHead::kGaussian}; }
};

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"variant", to_string(c.variant)}, {"representation", to_string(c.representation)},
          {"d_c", c.d_c},                    {"d_r", c.d_r},
          {"d_k", c.d_k},                    {"embed_dim", c.embed_dim},
          {"hidden", c.hidden},              {"activation", to_string(c.activation)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.representation = parse_representation(j.at("representation").get<std::string>());
  c.d_c = j.at("d_c").get<int>();
  c.d_r = j.at("d_r").get<int>();
  c.d_k = j.at("d_k").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.hidden = j.at("hidden").get<std::vector<int>>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  return c;
}

// ---------------------------------------------------------------------------
// Point sets

/// Distinct points of a meta-batch. Row i belongs to task `task[i]` and
/// appears target_weight[i] times in that task's target set and
/// context_weight[i] times in its context set.
struct PointSet {
  Matrix x;          // U x 2
  Matrix y;          // U x 1
  Matrix z;          // U x 1
  Matrix knowledge;  // B x d_k
  std::vector<Index> task;
  std::vector<double> target_weight;
  std::vector<double> context_weight;
  Index tasks = 0;

  Index rows() const { return x.rows(); }
};

/// Accumulates tasks into a PointSet.
class PointSetBuilder {
 public:
  explicit PointSetBuilder(int d_k) : d_k_(d_k) {}

  /// Adds one task; `samples[i]` gets the given target and context counts.
  /// Rows with both counts zero are dropped.
  void add_task(std::span<const Sample> samples, std::span<const double> target_counts,
                std::span<const double> context_counts, std::span<const double> knowledge) {
    if (target_counts.size() != samples.size() || context_counts.size() != samples.size()) {
      throw ConfigError("PointSetBuilder: one target and one context count per sample required");
    }
    if (static_cast<int>(knowledge.size()) != d_k_) {
      throw ConfigError("PointSetBuilder: knowledge has " + std::to_string(knowledge.size()) + " entries, model expects " +
                        std::to_string(d_k_));
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (target_counts[i] == 0.0 && context_counts[i] == 0.0) continue;
      rows_.push_back(samples[i]);
      task_.push_back(tasks_);
      target_.push_back(target_counts[i]);
      context_.push_back(context_counts[i]);
    }
    knowledge_.emplace_back(knowledge.begin(), knowledge.end());
    ++tasks_;
  }

  /// Adds an upsampled training task: counts come from the episode indices
  /// mapped back to raw samples through `upsampled.source_index`.
  void add_episode(const TaskDataset& raw, const TaskDataset& upsampled, const Episode& ep,
                   std::span<const double> knowledge) {
    std::vector<double> tc(raw.size(), 0.0), cc(raw.size(), 0.0);
    auto source = [&](std::size_t i) { return upsampled.upsampled() ? upsampled.source_index[i] : i; };
    for (auto i : ep.target) tc.at(source(i)) += 1.0;
    for (auto i : ep.context) cc.at(source(i)) += 1.0;
    add_task(raw.samples, tc, cc, knowledge);
  }

  PointSet build() const {
    PointSet ps;
    const auto n = static_cast<Index>(rows_.size());
    ps.x.resize(n, 2);
    ps.y.resize(n, 1);
    ps.z.resize(n, 1);
    for (Index i = 0; i < n; ++i) {
      const auto& s = rows_[static_cast<std::size_t>(i)];
      ps.x(i, 0) = s.x[0];
      ps.x(i, 1) = s.x[1];
      ps.y(i, 0) = s.y;
      ps.z(i, 0) = s.z;
    }
    ps.knowledge.resize(tasks_, d_k_);
    for (Index t = 0; t < tasks_; ++t)
      for (int j = 0; j < d_k_; ++j) ps.knowledge(t, j) = knowledge_[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
    ps.task = task_;
    ps.target_weight = target_;
    ps.context_weight = context_;
    ps.tasks = tasks_;
    return ps;
  }

 private:
  int d_k_;
  Index tasks_ = 0;
  std::vector<Sample> rows_;
  std::vector<Index> task_;
  std::vector<double> target_, context_;
  std::vector<std::vector<double>> knowledge_;
};

// ---------------------------------------------------------------------------
// Model

/// Per-task decoder NLL summed over the target set (B x 1) plus the
/// intermediate quantities the critic needs.
struct ElboTerms {
  Tensor l1;            // scalar: mean over tasks of the summed target NLL
  Tensor l2;            // scalar: mean over tasks of KL(target posterior || context posterior)
  Tensor l1_per_task;   // B x 1
  Tensor l2_per_task;   // B x 1
  Tensor r;             // U x r_dim
  GaussianTensors context_posterior;
  GaussianTensors target_posterior;
};

class NpModel {
 public:
  NpModel() = default;

  NpModel(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.representation == Representation::kLearned) rep_ = Mlp(cfg_.representation_spec(), rng);
    embedder_ = Mlp(cfg_.embedder_spec(), rng);
    head_ = Mlp(cfg_.head_spec(), rng);
    decoder_ = Mlp(cfg_.decoder_spec(), rng);
  }

  const ModelConfig& config() const { return cfg_; }

  /// r(x) for each row of an n x 2 input.
  Tensor represent(const Matrix& x) const {
    if (x.cols() != 2) throw ConfigError("represent: x must have 2 columns");
    if (rep_) return rep_->forward(Tensor::constant(x));
    return Tensor::constant(x.col(0) + x.col(1));
  }

  /// Posterior over C per task from weighted point sets; an empty set gives a
  /// zero aggregate.
  GaussianTensors encode(const Tensor& r, const Matrix& y, std::span<const Index> task, std::span<const double> weight,
                         Index tasks, const Matrix& knowledge) const {
    if (knowledge.rows() != tasks || knowledge.cols() != cfg_.d_k) {
      throw ConfigError("encode: knowledge must be " + std::to_string(tasks) + " x " + std::to_string(cfg_.d_k));
    }
    const Tensor emb = embedder_.forward(ops::concat_cols({r, Tensor::constant(y)}));
    return encode_embedded(emb, task, weight, tasks, knowledge);
  }

  GaussianTensors decode(const Tensor& c_rows, const Tensor& r) const {
    return decoder_.forward_gaussian(ops::concat_cols({c_rows, r}));
  }

  /// L1 with one reparameterised draw C = mu + sigma * eps from the context
  /// posterior (eps is B x d_c), and L2 = KL(target side || context side).
  ElboTerms elbo_terms(const PointSet& ps, const Matrix& eps) const {
    if (eps.rows() != ps.tasks || eps.cols() != cfg_.d_c) throw ConfigError("elbo_terms: eps must be B x d_c");
    ElboTerms out;
    out.r = represent(ps.x);
    const Tensor emb = embedder_.forward(ops::concat_cols({out.r, Tensor::constant(ps.y)}));
    out.context_posterior = encode_embedded(emb, ps.task, ps.context_weight, ps.tasks, ps.knowledge);
    out.target_posterior = encode_embedded(emb, ps.task, ps.target_weight, ps.tasks, ps.knowledge);
    const auto& q = out.context_posterior;
    const Tensor c = ops::add(q.mean, ops::mul(ops::sqrt(q.var), Tensor::constant(eps)));
    const auto pred = decode(ops::gather_rows(c, ps.task), out.r);
    const Tensor nll = ops::gaussian_nll(ps.y, pred.mean, pred.var);
    out.l1_per_task = ops::segment_reduce(nll, ps.task, ps.target_weight, ps.tasks, false);
    out.l2_per_task = ops::kl_diag(out.target_posterior.mean, out.target_posterior.var, q.mean, q.var);
    out.l1 = ops::mean(out.l1_per_task);
    out.l2 = ops::mean(out.l2_per_task);
    return out;
  }

  /// Summed target NLL per task averaged over `samples` draws of C from the
  /// context posterior. No graph is recorded.
  std::vector<double> predictive_loss(const PointSet& ps, Rng& rng, int samples) const {
    NoGradGuard guard;
    const Tensor r = represent(ps.x);
    const auto q = encode(r, ps.y, ps.task, ps.context_weight, ps.tasks, ps.knowledge);
    const Matrix sd = q.var.value().cwiseSqrt();
    std::vector<double> loss(static_cast<std::size_t>(ps.tasks), 0.0);
    for (int s = 0; s < samples; ++s) {
      Matrix c = q.mean.value();
      for (Index i = 0; i < c.size(); ++i) c.data()[i] += sd.data()[i] * rng.normal();
      const auto pred = decode(ops::gather_rows(Tensor::constant(c), ps.task), r);
      const Matrix nll = ops::gaussian_nll(ps.y, pred.mean, pred.var).value();
      for (Index i = 0; i < nll.rows(); ++i) {
        loss[static_cast<std::size_t>(ps.task[static_cast<std::size_t>(i)])] +=
            ps.target_weight[static_cast<std::size_t>(i)] * nll(i, 0);
      }
    }
    for (double& l : loss) l /= static_cast<double>(samples);
    return loss;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (rep_) {
      auto p = rep_->named_parameters("rep");
      out.insert(out.end(), p.begin(), p.end());
    }
    for (auto [mlp, name] : {std::pair{&embedder_, "embed"}, std::pair{&head_, "head"}, std::pair{&decoder_, "dec"}}) {
      auto p = mlp->named_parameters(name);
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (auto& [name, t] : named_parameters()) out.push_back(name);
    return out;
  }

  bool has_representation_network() const { return rep_.has_value(); }
  Mlp& representation_network() { return rep_.value(); }
  Mlp& embedder() { return embedder_; }
  Mlp& head() { return head_; }
  Mlp& decoder() { return decoder_; }

  NpModel clone() const {
    NpModel copy;
    copy.cfg_ = cfg_;
    if (rep_) copy.rep_ = rep_->clone();
    copy.embedder_ = embedder_.clone();
    copy.head_ = head_.clone();
    copy.decoder_ = decoder_.clone();
    return copy;
  }

  /// Copies parameter values from `other` (same config) without replacing leaves.
  void assign_from(const NpModel& other) {
    auto mine = parameters();
    auto theirs = other.parameters();
    if (mine.size() != theirs.size()) throw ConfigError("assign_from: parameter lists differ");
    for (std::size_t i = 0; i < mine.size(); ++i) mine[i].mutable_value() = theirs[i].value();
  }

 private:
  GaussianTensors encode_embedded(const Tensor& emb, std::span<const Index> task, std::span<const double> weight,
                                  Index tasks, const Matrix& knowledge) const {
    Tensor agg = ops::segment_reduce(emb, task, weight, tasks, true);
    if (cfg_.d_k > 0) agg = ops::concat_cols({agg, Tensor::constant(knowledge)});
    return head_.forward_gaussian(agg);
  }

  ModelConfig cfg_;
  std::optional<Mlp> rep_;
  Mlp embedder_;
  Mlp head_;
  Mlp decoder_;
};

// ---------------------------------------------------------------------------
// Checkpoints: versioned JSON with the config echo, the training step and
// every parameter tensor. Doubles are written with round-trip precision.

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  NpModel model;
  long step = 0;
  nlohmann::json extra;
};

inline nlohmann::json tensor_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix tensor_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Index>(), cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Index>(data.size()) != rows * cols) throw ConfigError("checkpoint tensor has the wrong number of entries");
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

inline nlohmann::json checkpoint_json(const NpModel& model, long step, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, t] : model.named_parameters()) tensors[name] = tensor_json(t.value());
  return {{"format", "rime-checkpoint"}, {"version", kCheckpointVersion}, {"config", model_config_json(model.config())},
          {"step", step},               {"extra", extra},               {"tensors", tensors}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "rime-checkpoint") throw ConfigError("not a checkpoint (format tag missing)");
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(j.at("version").get<int>()));
  }
  Checkpoint ck;
  Rng rng(0);
  ck.model = NpModel(model_config_from_json(j.at("config")), rng);
  const auto& tensors = j.at("tensors");
  for (auto& [name, t] : ck.model.named_parameters()) {
    if (!tensors.contains(name)) throw ConfigError("checkpoint lacks tensor '" + name + "'");
    Matrix m = tensor_from_json(tensors.at(name));
    if (m.rows() != t.rows() || m.cols() != t.cols()) throw ConfigError("checkpoint tensor '" + name + "' has the wrong shape");
    t.mutable_value() = std::move(m);
  }
  ck.step = j.at("step").get<long>();
  ck.extra = j.value("extra", nlohmann::json::object());
  return ck;
}

inline void save_checkpoint(const std::string& path, const NpModel& model, long step,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write checkpoint: " + path);
  out << checkpoint_json(model, step, extra).dump() << '\n';
  if (!out) throw UsageError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("checkpoint not found: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace rime
