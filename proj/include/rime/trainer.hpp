#pragma once

// Two-stage training.
//
// Stage 1 fits cross-fitted nuisance weights on the pooled training tasks.
// Stage 2 alternates one predictive update of (theta, gamma) on
//   L = L1 + beta * L2 + lambda * L3
// with `updates_per_step` critic updates on fresh z-shuffled batches. Every
// time a task is drawn its target set is re-upsampled from the stage-1
// weights and a context of U[0, 100] points is drawn from it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rime/critic.hpp"
#include "rime/datagen.hpp"
#include "rime/npmodel.hpp"
#include "rime/numcore.hpp"
#include "rime/reweigh.hpp"

namespace rime {

enum class Weighting { kEstimated, kUniform };

inline std::string to_string(Weighting w) { return w == Weighting::kEstimated ? "estimated" : "uniform"; }

struct TrainConfig {
  double beta = 1.0;
  double lambda = 1.0;
  double lr = 1e-3;
  long steps = 2000;
  int meta_batch = 16;
  std::size_t upsample = 10;
  int folds = 5;
  std::uint64_t seed = 0;
  long eval_interval = 100;
  int warmup = 200;
  double validation_fraction = 0.2;
  /// Tasks in the fixed training pool (training and validation splits together).
  std::size_t pool_tasks = 200;
  std::size_t points_per_task = 100;
  SampledContextSize context{0, 100};
  int validation_samples = 16;
  Weighting weighting = Weighting::kEstimated;

  void validate() const {
    if (beta < 0.0 || lambda < 0.0) throw ConfigError("TrainConfig: beta and lambda must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be positive");
    if (steps < 1 || meta_batch < 1 || upsample < 1 || eval_interval < 1 || validation_samples < 1) {
      throw ConfigError("TrainConfig: steps, meta_batch, upsample, eval_interval and validation_samples must be >= 1");
    }
    if (folds < 2) throw ConfigError("TrainConfig: folds must be >= 2");
    if (warmup < 0) throw ConfigError("TrainConfig: warmup must be >= 0");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
      throw ConfigError("TrainConfig: validation_fraction must lie in (0, 1)");
    }
    if (pool_tasks < 2 || points_per_task < 2) throw ConfigError("TrainConfig: pool_tasks and points_per_task must be >= 2");
    if (context.min > context.max) throw ConfigError("TrainConfig: context min exceeds max");
  }

  bool critic_enabled() const { return lambda > 0.0; }
};

/// Everything needed to reproduce one training run.
struct TrainJob {
  GeneratorConfig generator;
  EnvironmentSpec env{0.5};
  ModelConfig model;
  CriticConfig critic;
  TrainConfig train;
  WeightModelConfig weight_model;

  void validate() const {
    model.validate();
    train.validate();
    if (train.critic_enabled()) {
      critic.validate();
      if (critic.variant == CriticVariant::kKnowledge && model.d_k == 0) {
        throw ConfigError("k-informed critic needs a model with knowledge (variant inp)");
      }
    }
    if (model.d_k > 0 && !generator.multitask) throw ConfigError("knowledge of b needs the multitask family");
  }
};

inline nlohmann::json train_config_json(const TrainConfig& t) {
  return {{"beta", t.beta},
          {"lambda", t.lambda},
          {"lr", t.lr},
          {"steps", t.steps},
          {"meta_batch", t.meta_batch},
          {"upsample", t.upsample},
          {"folds", t.folds},
          {"seed", t.seed},
          {"eval_interval", t.eval_interval},
          {"warmup", t.warmup},
          {"validation_fraction", t.validation_fraction},
          {"pool_tasks", t.pool_tasks},
          {"points_per_task", t.points_per_task},
          {"context_min", t.context.min},
          {"context_max", t.context.max},
          {"validation_samples", t.validation_samples},
          {"weighting", to_string(t.weighting)}};
}

inline nlohmann::json critic_config_json(const CriticConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"hidden", c.hidden},
          {"activation", to_string(c.activation)},
          {"mi_form", to_string(c.mi_form)},
          {"updates_per_step", c.updates_per_step},
          {"batch_rows", c.batch_rows},
          {"lr", c.lr}};
}

inline nlohmann::json weight_model_json(const WeightModelConfig& w) {
  return {{"hidden", w.classifier.hidden_dims}, {"epochs", w.epochs},      {"lr", w.lr},
          {"clamp_low", w.clamp_low},           {"clamp_high", w.clamp_high}, {"pooled", w.pooled}};
}

inline nlohmann::json train_job_json(const TrainJob& j) {
  return {{"generator", generator_config_json(j.generator)}, {"train_e", j.env.e},
          {"model", model_config_json(j.model)},              {"critic", critic_config_json(j.critic)},
          {"train", train_config_json(j.train)},              {"weight_model", weight_model_json(j.weight_model)}};
}

// ---------------------------------------------------------------------------
// Data-access ledger: which phase read which dataset, in order.

struct DataAccess {
  std::string phase;
  std::string dataset;
};

class DataAccessLog {
 public:
  void record(std::string phase, std::string dataset) { entries_.push_back({std::move(phase), std::move(dataset)}); }
  const std::vector<DataAccess>& entries() const { return entries_; }

  /// Index of the first access to `dataset`, or -1.
  long first(const std::string& dataset) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].dataset == dataset) return static_cast<long>(i);
    return -1;
  }

 private:
  std::vector<DataAccess> entries_;
};

// ---------------------------------------------------------------------------
// Stage 1

struct TrainingData {
  std::vector<TaskDataset> train;       // raw tasks with stage-1 weights
  std::vector<TaskDataset> validation;  // held-out tasks, same treatment
  std::vector<WeightTable> tables;      // empty for uniform weighting
};

/// Draws the task pool at the training environment.
inline std::vector<TaskDataset> sample_task_pool(const TrainJob& job) {
  Rng rng(derive_seed(job.train.seed, {0x706f6f6c}));  // "pool"
  std::vector<TaskDataset> pool;
  for (std::size_t t = 0; t < job.train.pool_tasks; ++t) {
    const auto params = sample_task_params(rng, static_cast<int>(t), job.generator);
    pool.push_back(sample_task(rng, job.env, params, job.train.points_per_task, job.generator));
  }
  return pool;
}

/// Fits stage-1 weights on the pool (or sets them to 1 for uniform
/// weighting) and splits off the validation tasks.
inline TrainingData run_stage1(const TrainJob& job, std::vector<TaskDataset> pool, DataAccessLog* access = nullptr) {
  if (pool.empty()) throw UsageError("run_stage1: empty task pool");
  if (access) access->record("stage1", "train_pool");
  TrainingData data;
  if (job.train.weighting == Weighting::kEstimated) {
    Rng rng(derive_seed(job.train.seed, {0x73746731}));  // "stg1"
    WeightModelConfig wm = job.weight_model;
    wm.folds = job.train.folds;
    data.tables = assign_weights(rng, pool, wm);
  } else {
    for (auto& t : pool) t.weights.assign(t.size(), 1.0);
  }
  const auto n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(job.train.validation_fraction * static_cast<double>(pool.size()))));
  if (n_val >= pool.size()) throw ConfigError("run_stage1: validation split leaves no training tasks");
  data.validation.assign(std::make_move_iterator(pool.end() - static_cast<std::ptrdiff_t>(n_val)),
                         std::make_move_iterator(pool.end()));
  pool.resize(pool.size() - n_val);
  data.train = std::move(pool);
  return data;
}

inline TrainingData prepare_training_data(const TrainJob& job, DataAccessLog* access = nullptr) {
  return run_stage1(job, sample_task_pool(job), access);
}

// ---------------------------------------------------------------------------
// Logs and checkpoints

struct LossBreakdown {
  long step = 0;
  double l1 = 0.0, l2 = 0.0, l3 = 0.0, total = 0.0;
  double critic_loss = std::numeric_limits<double>::quiet_NaN();
  bool l1_finite = true, l2_finite = true, l3_finite = true;
  std::size_t clamped = 0;

  bool finite() const { return l1_finite && l2_finite && l3_finite && std::isfinite(total); }
};

struct ValidationRecord {
  long step = 0;
  double loss = 0.0;
};

/// Checkpoint with the lowest validation loss; the earliest wins ties.
inline ValidationRecord select_checkpoint(std::span<const ValidationRecord> history) {
  if (history.empty()) throw UsageError("select_checkpoint: no validation records");
  ValidationRecord best = history.front();
  for (const auto& r : history)
    if (r.loss < best.loss) best = r;
  return best;
}

/// Append-only line-delimited run log, mirrored to a file when one is given.
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(const std::string& path) : out_(std::make_shared<std::ofstream>(path)) {
    if (!*out_) throw UsageError("cannot open run log: " + path);
  }

  void append(const nlohmann::json& record) {
    lines_.push_back(record.dump());
    if (out_) *out_ << lines_.back() << '\n' << std::flush;
  }

  const std::vector<std::string>& lines() const { return lines_; }

  std::uint64_t digest() const {
    Fnv1a h;
    for (const auto& l : lines_) {
      h.update(l);
      h.update("\n");
    }
    return h.value();
  }

 private:
  std::vector<std::string> lines_;
  std::shared_ptr<std::ofstream> out_;
};

inline std::string hex_digest(std::uint64_t d) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << d;
  return os.str();
}

/// Reads validation records back out of run-log lines.
inline std::vector<ValidationRecord> validation_history(std::span<const std::string> lines) {
  std::vector<ValidationRecord> out;
  for (const auto& l : lines) {
    const auto j = nlohmann::json::parse(l);
    if (j.value("record", "") == "validation") out.push_back({j.at("step").get<long>(), j.at("loss").get<double>()});
  }
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

// ---------------------------------------------------------------------------
// Stage 2

namespace detail_trainer {

inline nlohmann::json adam_json(const AdamState& s) {
  nlohmann::json m = nlohmann::json::array(), v = nlohmann::json::array();
  for (const auto& x : s.m) m.push_back(tensor_json(x));
  for (const auto& x : s.v) v.push_back(tensor_json(x));
  return {{"t", s.t}, {"lr", s.lr}, {"beta1", s.beta1}, {"beta2", s.beta2}, {"eps", s.eps}, {"m", m}, {"v", v}};
}

inline AdamState adam_from_json(const nlohmann::json& j) {
  AdamState s;
  s.t = j.at("t").get<long long>();
  s.lr = j.at("lr").get<double>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  for (const auto& x : j.at("m")) s.m.push_back(tensor_from_json(x));
  for (const auto& x : j.at("v")) s.v.push_back(tensor_from_json(x));
  return s;
}

inline nlohmann::json params_json(const std::vector<std::pair<std::string, Tensor>>& named) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [name, t] : named) out[name] = tensor_json(t.value());
  return out;
}

inline void load_params(const std::vector<std::pair<std::string, Tensor>>& named, const nlohmann::json& j) {
  for (auto [name, t] : named) {
    Matrix m = tensor_from_json(j.at(name));
    if (m.rows() != t.rows() || m.cols() != t.cols()) throw ConfigError("snapshot tensor '" + name + "' has the wrong shape");
    t.mutable_value() = std::move(m);
  }
}

}  // namespace detail_trainer

class Stage2Trainer {
 public:
  Stage2Trainer(TrainJob job, const TrainingData& data) : job_(std::move(job)), data_(&data) {
    job_.validate();
    if (data.train.empty() || data.validation.empty()) throw UsageError("Stage2Trainer: empty training or validation split");
    Rng init(derive_seed(job_.train.seed, {0x696e6974}));  // "init"
    model_ = NpModel(job_.model, init);
    model_adam_ = make_adam(model_.parameters(), job_.train.lr);
    model_names_ = model_.parameter_names();
    if (job_.train.critic_enabled()) {
      const int side = job_.critic.side_dim(job_.model.d_k, job_.model.d_c);
      critic_ = Critic(job_.critic, side + job_.model.r_dim() + 2, init);
      critic_adam_ = make_adam(critic_.parameters(), job_.critic.lr);
      critic_names_ = critic_.parameter_names();
    }
    rng_ = Rng(derive_seed(job_.train.seed, {0x73746732}));  // "stg2"
    build_validation_set();
  }

  const TrainJob& job() const { return job_; }
  NpModel& model() { return model_; }
  const NpModel& model() const { return model_; }
  Critic& critic() { return critic_; }
  long step() const { return step_; }
  long critic_updates() const { return critic_updates_; }
  long warmup_updates() const { return warmup_updates_; }
  bool warmed_up() const { return warmed_up_; }

  /// Critic-only updates on batches from the initial representation.
  void warmup() {
    if (warmed_up_) return;
    warmed_up_ = true;
    if (!job_.train.critic_enabled()) return;
    for (int i = 0; i < job_.train.warmup; ++i) {
      const auto ps = sample_batch();
      const auto pool = critic_pool(ps);
      critic_update(critic_, critic_adam_, rng_, pool.rows, pool.weight, job_.critic.batch_rows);
      ++warmup_updates_;
    }
  }

  /// One predictive update followed by the critic updates.
  LossBreakdown train_step() {
    LossBreakdown b = predictive_step();
    b.critic_loss = critic_phase();
    ++step_;
    return b;
  }

  /// Draws a meta-batch and takes one Adam step on (theta, gamma). The
  /// critic's parameters receive gradients here but are never stepped.
  LossBreakdown predictive_step() {
    if (!warmed_up_) warmup();
    last_batch_ = sample_batch();
    const PointSet& ps = *last_batch_;
    Matrix eps(ps.tasks, job_.model.d_c);
    for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng_.normal();

    LossBreakdown b;
    b.step = step_;
    const auto terms = model_.elbo_terms(ps, eps);
    Tensor total = ops::add(terms.l1, ops::scale(terms.l2, job_.train.beta));
    b.l1 = terms.l1.item();
    b.l2 = terms.l2.item();
    if (job_.train.critic_enabled()) {
      const Tensor rows = critic_inputs(job_.critic.variant, side_input(ps, terms), ps.task, terms.r, ps.y, ps.z);
      const auto pen = critic_.penalty(rows, row_weights(ps));
      b.l3 = pen.value.item();
      b.clamped = pen.clamped;
      total = ops::add(total, ops::scale(pen.value, job_.train.lambda));
    }
    b.total = total.item();
    b.l1_finite = std::isfinite(b.l1);
    b.l2_finite = std::isfinite(b.l2);
    b.l3_finite = std::isfinite(b.l3);
    if (!b.finite()) halt(b);

    auto params = model_.parameters();
    backward(total, params);
    adam_step(model_adam_, params, model_names_);
    return b;
  }

  /// `updates_per_step` critic updates on the last meta-batch, featurised by
  /// the current (detached) representation. Returns the mean critic loss, or
  /// NaN when the critic is disabled.
  double critic_phase() {
    if (!job_.train.critic_enabled() || !last_batch_) return std::numeric_limits<double>::quiet_NaN();
    const auto pool = critic_pool(*last_batch_);
    double sum = 0.0;
    for (int u = 0; u < job_.critic.updates_per_step; ++u) {
      sum += critic_update(critic_, critic_adam_, rng_, pool.rows, pool.weight, job_.critic.batch_rows);
      ++critic_updates_;
    }
    return sum / job_.critic.updates_per_step;
  }

  /// Summed target NLL on the fixed validation episodes, averaged over tasks
  /// and latent samples. Uses its own fixed noise stream.
  double validation_loss() const {
    Rng noise(derive_seed(job_.train.seed, {0x76616c6e}));  // "valn"
    const auto per_task = model_.predictive_loss(validation_set_, noise, job_.train.validation_samples);
    double s = 0.0;
    for (double v : per_task) s += v;
    return s / static_cast<double>(per_task.size());
  }

  /// Serialisable snapshot of everything that determines future steps.
  nlohmann::json snapshot() const {
    nlohmann::json j{{"format", "rime-runstate"},
                     {"version", 1},
                     {"job", train_job_json(job_)},
                     {"step", step_},
                     {"critic_updates", critic_updates_},
                     {"warmup_updates", warmup_updates_},
                     {"warmed_up", warmed_up_},
                     {"rng", rng_.state()},
                     {"model", detail_trainer::params_json(model_.named_parameters())},
                     {"model_adam", detail_trainer::adam_json(model_adam_)}};
    if (job_.train.critic_enabled()) {
      j["critic"] = detail_trainer::params_json(critic_.named_parameters());
      j["critic_adam"] = detail_trainer::adam_json(critic_adam_);
    }
    return j;
  }

  void restore(const nlohmann::json& j) {
    if (j.value("format", "") != "rime-runstate") throw ConfigError("not a run-state snapshot");
    if (j.at("job") != train_job_json(job_)) throw ConfigError("snapshot was taken from a different job configuration");
    step_ = j.at("step").get<long>();
    critic_updates_ = j.at("critic_updates").get<long>();
    warmup_updates_ = j.at("warmup_updates").get<long>();
    warmed_up_ = j.at("warmed_up").get<bool>();
    rng_.set_state(j.at("rng").get<std::string>());
    detail_trainer::load_params(model_.named_parameters(), j.at("model"));
    model_adam_ = detail_trainer::adam_from_json(j.at("model_adam"));
    if (job_.train.critic_enabled()) {
      detail_trainer::load_params(critic_.named_parameters(), j.at("critic"));
      critic_adam_ = detail_trainer::adam_from_json(j.at("critic_adam"));
    }
  }

  /// Where to write the RunState and last batch if a loss goes non-finite.
  void set_dump_path(std::string path) { dump_path_ = std::move(path); }

  /// Draws a meta-batch of training episodes (exposed for tests).
  PointSet sample_batch() {
    const auto& train = data_->train;
    const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(job_.train.meta_batch), train.size());
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = 0; i < b; ++i) std::swap(order[i], order[i + rng_.index(order.size() - i)]);
    PointSetBuilder builder(job_.model.d_k);
    for (std::size_t i = 0; i < b; ++i) add_episode(builder, train[order[i]], rng_);
    return builder.build();
  }

 private:
  struct Pool {
    Matrix rows;
    std::vector<double> weight;
  };

  std::vector<double> knowledge_for(const TaskDataset& t) const {
    return job_.model.d_k > 0 ? t.knowledge : std::vector<double>{};
  }

  void add_episode(PointSetBuilder& builder, const TaskDataset& task, Rng& rng) const {
    const auto up = upsample_by_weights(rng, task, task.weights, job_.train.upsample);
    const auto ep = make_episode(rng, up, job_.train.context);
    builder.add_episode(task, up, ep, knowledge_for(task));
  }

  void build_validation_set() {
    Rng rng(derive_seed(job_.train.seed, {0x76616c65}));  // "vale"
    PointSetBuilder builder(job_.model.d_k);
    for (const auto& t : data_->validation) add_episode(builder, t, rng);
    validation_set_ = builder.build();
  }

  static std::vector<double> row_weights(const PointSet& ps) {
    std::vector<double> w(ps.target_weight.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = ps.target_weight[i] + ps.context_weight[i];
    return w;
  }

  Tensor side_input(const PointSet& ps, const ElboTerms& terms) const {
    switch (job_.critic.variant) {
      case CriticVariant::kUninformed: return {};
      case CriticVariant::kKnowledge: return Tensor::constant(ps.knowledge);
      case CriticVariant::kContext: return terms.context_posterior.mean;
    }
    return {};
  }

  /// Critic rows for the current (theta, gamma), detached.
  Pool critic_pool(const PointSet& ps) const {
    NoGradGuard guard;
    const Tensor r = model_.represent(ps.x);
    Tensor side;
    if (job_.critic.variant == CriticVariant::kKnowledge) side = Tensor::constant(ps.knowledge);
    if (job_.critic.variant == CriticVariant::kContext) {
      side = model_.encode(r, ps.y, ps.task, ps.context_weight, ps.tasks, ps.knowledge).mean;
    }
    return {critic_inputs(job_.critic.variant, side, ps.task, r, ps.y, ps.z).value(), row_weights(ps)};
  }

  [[noreturn]] void halt(const LossBreakdown& b) const {
    std::ostringstream msg;
    msg << "non-finite loss at step " << b.step << ": L1=" << b.l1 << " L2=" << b.l2 << " L3=" << b.l3
        << " total=" << b.total;
    if (!dump_path_.empty()) {
      nlohmann::json dump{{"breakdown", {{"step", b.step}, {"l1", b.l1}, {"l2", b.l2}, {"l3", b.l3}}},
                          {"state", snapshot()}};
      if (last_batch_) {
        const auto& ps = *last_batch_;
        dump["batch"] = {{"x", tensor_json(ps.x)},
                         {"y", tensor_json(ps.y)},
                         {"z", tensor_json(ps.z)},
                         {"knowledge", tensor_json(ps.knowledge)},
                         {"task", ps.task},
                         {"target_weight", ps.target_weight},
                         {"context_weight", ps.context_weight}};
      }
      std::ofstream out(dump_path_);
      out << dump.dump() << '\n';
      msg << " (state dumped to " << dump_path_ << ")";
    }
    throw NumericalError(msg.str());
  }

  TrainJob job_;
  const TrainingData* data_;
  NpModel model_;
  Critic critic_;
  AdamState model_adam_, critic_adam_;
  std::vector<std::string> model_names_, critic_names_;
  Rng rng_;
  PointSet validation_set_;
  std::optional<PointSet> last_batch_;
  std::string dump_path_;
  long step_ = 0;
  long critic_updates_ = 0;
  long warmup_updates_ = 0;
  bool warmed_up_ = false;
};

inline nlohmann::json breakdown_json(const LossBreakdown& b) {
  nlohmann::json j{{"record", "step"}, {"step", b.step}, {"l1", b.l1}, {"l2", b.l2}, {"l3", b.l3}, {"total", b.total}};
  if (std::isfinite(b.critic_loss)) j["critic_loss"] = b.critic_loss;
  if (b.clamped) j["clamped"] = b.clamped;
  return j;
}

struct TrainResult {
  NpModel best_model;
  ValidationRecord best;
  std::vector<ValidationRecord> history;
  LossBreakdown first, last;
  long critic_updates = 0;
  long warmup_updates = 0;
  std::uint64_t log_digest = 0;
};

struct Stage2Options {
  /// Log every n-th step record (validation records are always logged).
  long log_every = 1;
  std::string snapshot_path;  // written at the end of the run
  std::string dump_path;      // written if a loss goes non-finite
  std::function<void(const LossBreakdown&)> on_step;
};

/// Runs stage 2 to `job.train.steps`, validating every eval_interval steps and
/// keeping the parameters with the lowest validation loss.
inline TrainResult run_stage2(Stage2Trainer& trainer, RunLog& log, const Stage2Options& opt = {},
                              DataAccessLog* access = nullptr) {
  const auto& cfg = trainer.job().train;
  if (access) {
    access->record("stage2", "train_split");
    access->record("stage2", "validation_split");
  }
  trainer.set_dump_path(opt.dump_path);
  if (trainer.step() == 0) log.append({{"record", "job"}, {"job", train_job_json(trainer.job())}});
  TrainResult res;
  bool first = true;
  while (trainer.step() < cfg.steps) {
    const auto b = trainer.train_step();
    if (first) res.first = b;
    first = false;
    res.last = b;
    if (opt.on_step) opt.on_step(b);
    if (b.step % std::max<long>(1, opt.log_every) == 0) log.append(breakdown_json(b));
    if (trainer.step() % cfg.eval_interval == 0 || trainer.step() == cfg.steps) {
      const ValidationRecord v{trainer.step(), trainer.validation_loss()};
      log.append({{"record", "validation"}, {"step", v.step}, {"loss", v.loss}});
      res.history.push_back(v);
      if (res.history.size() == 1 || v.loss < res.best.loss) {
        res.best = v;
        res.best_model = trainer.model().clone();
      }
    }
  }
  res.critic_updates = trainer.critic_updates();
  res.warmup_updates = trainer.warmup_updates();
  if (!res.history.empty()) {
    log.append({{"record", "selected"}, {"step", res.best.step}, {"loss", res.best.loss}});
    if (access) access->record("select", "validation_split");
  }
  if (!opt.snapshot_path.empty()) {
    std::ofstream out(opt.snapshot_path);
    if (!out) throw UsageError("cannot write run state: " + opt.snapshot_path);
    out << trainer.snapshot().dump() << '\n';
  }
  res.log_digest = log.digest();
  return res;
}

}  // namespace rime
