#pragma once

// Command-line front end: gen, train, eval, report and repro subcommands over
// the harness. run_cli returns the process exit status and never exits.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rime/harness.hpp"

namespace rime {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitIncomplete = 4,
};

struct CliOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string experiment;
  std::string method;
  std::string knowledge;
  std::string critic;
  std::string representation;
  std::string mi_form;
  bool fast = false;
  int jobs = 1;
  bool per_point = false;
  std::vector<std::string> checkpoints;
  std::string input;
};

namespace detail_cli {

/// Run-level keys a config file may set in its [run] section.
inline const std::set<std::string>& run_keys() {
  static const std::set<std::string> keys{"experiment", "method",  "knowledge", "critic", "representation",
                                          "mi_form",    "seed",    "out",       "fast",   "jobs"};
  return keys;
}

/// Fills an unset flag from the config; a set flag that disagrees is an error.
inline void merge(std::string& flag, const std::string& flag_name, const ConfigSection& run, const std::string& key) {
  const auto it = run.find(key);
  if (it == run.end()) return;
  if (!flag.empty() && flag != it->second) {
    throw ConfigError("conflict: " + flag_name + " " + flag + " on the command line but " + key + " = " + it->second +
                      " in the config file");
  }
  flag = it->second;
}

struct Resolved {
  ExperimentPreset preset;
  ConfigFile file;
};

inline Resolved resolve(CliOptions& o) {
  Resolved r;
  if (!o.config.empty()) r.file = read_config_file(o.config);
  ConfigSection run = r.file.count("run") ? r.file.at("run") : ConfigSection{};
  for (const auto& [key, value] : run)
    if (!run_keys().count(key)) throw ConfigError("unknown key '" + key + "' in [run]");
  merge(o.experiment, "--experiment", run, "experiment");
  merge(o.method, "--method", run, "method");
  merge(o.knowledge, "--knowledge", run, "knowledge");
  merge(o.critic, "--critic", run, "critic");
  merge(o.representation, "--representation", run, "representation");
  merge(o.mi_form, "--mi-form", run, "mi_form");
  merge(o.out, "--out", run, "out");
  if (run.count("seed")) {
    const auto s = static_cast<std::uint64_t>(std::stoull(run.at("seed")));
    if (o.seed && *o.seed != s) {
      throw ConfigError("conflict: --seed " + std::to_string(*o.seed) + " on the command line but seed = " +
                        run.at("seed") + " in the config file");
    }
    o.seed = s;
  }
  if (run.count("fast") && run.at("fast") == "true") o.fast = true;
  if (run.count("jobs")) o.jobs = std::stoi(run.at("jobs"));
  if (o.experiment.empty()) o.experiment = "exp1";
  r.preset = make_preset(o.experiment, o.fast);
  if (r.file.count("")) apply_config(r.preset, r.file.at(""));
  if (r.file.count(o.experiment)) apply_config(r.preset, r.file.at(o.experiment));
  for (const auto& [name, section] : r.file)
    if (name != "" && name != "run" && name != "exp1" && name != "exp2") throw ConfigError("unknown config section [" + name + "]");
  if (!o.mi_form.empty()) r.preset.base.critic.mi_form = parse_mi_form(o.mi_form);
  if (o.per_point) r.preset.eval.per_point = true;
  return r;
}

/// Maps --method plus the RIME qualifiers onto one method of the matrix.
inline MethodSpec resolve_method(const CliOptions& o, const ExperimentPreset& p) {
  const bool mt = p.multitask();
  const std::string method = o.method.empty() ? "np" : o.method;
  if (method == "np" || method == "inp") {
    if (!o.critic.empty()) throw ConfigError("conflict: --critic applies only to --method rime");
    if (!o.representation.empty()) throw ConfigError("conflict: --representation applies only to --method rime");
    if (!o.knowledge.empty() && (o.knowledge == "on") != (method == "inp")) {
      throw ConfigError("conflict: --method " + method + " implies --knowledge " + (method == "inp" ? "on" : "off"));
    }
    if (method == "inp" && !mt) throw ConfigError("conflict: --method inp needs exp2 (exp1 has no knowledge)");
    return parse_method_id(method, mt);
  }
  if (method == "rime") {
    if (!o.knowledge.empty() && o.knowledge != "on" && o.knowledge != "off") {
      throw ConfigError("--knowledge expects on or off, got '" + o.knowledge + "'");
    }
    const bool knowledge = o.knowledge == "on";
    if (knowledge && !mt) throw ConfigError("conflict: --knowledge on needs exp2 (exp1 has no knowledge)");
    const auto critic = o.critic.empty() ? CriticVariant::kUninformed : parse_critic_variant(o.critic);
    const auto rep = o.representation.empty() ? Representation::kLearned : parse_representation(o.representation);
    if (critic == CriticVariant::kKnowledge && !knowledge) {
      throw ConfigError("conflict: --critic k needs --knowledge on");
    }
    return make_method(true, knowledge, critic, rep, mt);
  }
  if (!o.knowledge.empty() || !o.critic.empty() || !o.representation.empty()) {
    throw ConfigError("conflict: --method " + method + " is a full method id; drop --knowledge/--critic/--representation");
  }
  return parse_method_id(method, mt);
}

inline std::string require_out(const CliOptions& o) {
  if (o.out.empty()) throw UsageError("--out DIR is required for this subcommand");
  return o.out;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline std::string env_name(double e) {
  std::ostringstream os;
  os << e;
  return os.str();
}

inline int cmd_gen(CliOptions& o, std::ostream& out) {
  auto r = resolve(o);
  const auto dir = std::filesystem::path(require_out(o));
  std::filesystem::create_directories(dir);
  const std::uint64_t seed = o.seed.value_or(0);
  TrainJob job = r.preset.base;
  job.train.seed = seed;
  const auto pool = sample_task_pool(job);
  nlohmann::json manifest{{"generator", generator_config_json(job.generator)},
                          {"seed", seed},
                          {"experiment", r.preset.name},
                          {"train_env", job.env.e},
                          {"preset", preset_json(r.preset)},
                          {"build", build_describe()}};
  manifest["split"] = "train_pool";
  write_dataset((dir / "train_pool.jsonl").string(), manifest, pool);
  out << "wrote " << (dir / "train_pool.jsonl").string() << " (" << pool.size() << " tasks)\n";
  for (double e : r.preset.eval_envs) {
    const auto set = make_eval_set(job.generator, e, r.preset.eval, seed);
    manifest["split"] = "eval";
    manifest["env"] = e;
    const auto path = dir / ("eval_e" + env_name(e) + ".jsonl");
    write_dataset(path.string(), manifest, set.tasks);
    out << "wrote " << path.string() << " (" << set.tasks.size() << " tasks)\n";
  }
  return kExitOk;
}

inline int cmd_train(CliOptions& o, std::ostream& out) {
  auto r = resolve(o);
  const auto m = resolve_method(o, r.preset);
  const std::uint64_t seed = o.seed.value_or(0);
  const auto job = make_job(r.preset, m, seed);
  job.validate();
  const auto dir = std::filesystem::path(require_out(o));
  std::filesystem::create_directories(dir);
  DataAccessLog access;
  const auto data = prepare_training_data(job, &access);
  if (!data.tables.empty()) write_stage1_report((dir / "stage1.json").string(), data.tables);
  RunLog log((dir / "log.jsonl").string());
  Stage2Trainer trainer(job, data);
  Stage2Options so;
  so.log_every = 10;
  so.dump_path = (dir / "halt_dump.json").string();
  so.snapshot_path = (dir / "runstate.json").string();
  const auto res = run_stage2(trainer, log, so, &access);
  const auto ck = (dir / "checkpoint.json").string();
  save_checkpoint(ck, res.best_model, res.best.step,
                  {{"method", m.id()}, {"seed", seed}, {"experiment", r.preset.name}, {"job", train_job_json(job)}});
  nlohmann::json access_json = nlohmann::json::array();
  for (const auto& a : access.entries()) access_json.push_back({{"phase", a.phase}, {"dataset", a.dataset}});
  write_json(dir / "manifest.json", {{"method", m.id()},
                                     {"label", m.label},
                                     {"seed", seed},
                                     {"experiment", r.preset.name},
                                     {"config_digest", hex_digest(config_digest(job))},
                                     {"log_digest", hex_digest(res.log_digest)},
                                     {"checkpoint", ck},
                                     {"best_step", res.best.step},
                                     {"best_validation", res.best.loss},
                                     {"build", build_describe()},
                                     {"job", train_job_json(job)},
                                     {"preset", preset_json(r.preset)},
                                     {"data_access", access_json}});
  out << "method " << m.id() << " seed " << seed << " best step " << res.best.step << " validation " << res.best.loss
      << "\nlog digest " << hex_digest(res.log_digest) << "\ncheckpoint " << ck << '\n';
  return kExitOk;
}

inline int cmd_eval(CliOptions& o, std::ostream& out) {
  auto r = resolve(o);
  if (o.checkpoints.empty()) throw UsageError("eval needs at least one --checkpoint PATH");
  std::vector<Checkpoint> cks;
  for (const auto& path : o.checkpoints) cks.push_back(load_checkpoint(path));
  EvalReport rep;
  rep.experiment = r.preset.name;
  rep.multitask = r.preset.multitask();
  rep.envs = r.preset.eval_envs;
  rep.ks = r.preset.k_grid;
  std::set<std::uint64_t> seeds;
  std::map<std::uint64_t, std::vector<EvalSet>> sets;
  for (std::size_t i = 0; i < cks.size(); ++i) {
    const auto& extra = cks[i].extra;
    const std::string id = extra.value("method", std::string("np"));
    const std::uint64_t seed = o.seed.value_or(extra.value("seed", std::uint64_t{0}));
    if (extra.contains("experiment") && extra["experiment"] != r.preset.name) {
      throw ConfigError("checkpoint " + o.checkpoints[i] + " was trained for " + extra["experiment"].get<std::string>() +
                        ", not " + r.preset.name);
    }
    auto m = parse_method_id(id, rep.multitask);
    if (std::find(rep.methods.begin(), rep.methods.end(), m) == rep.methods.end()) rep.methods.push_back(m);
    seeds.insert(seed);
    if (!sets.count(seed))
      for (double e : rep.envs) sets[seed].push_back(make_eval_set(r.preset.base.generator, e, r.preset.eval, seed));
    for (const auto& set : sets[seed])
      for (auto k : rep.ks) rep.records.push_back({m.id(), seed, set.e, k, evaluate_kshot(cks[i].model, set, k, r.preset.eval).mean});
    RunManifest man;
    man.method = m.id();
    man.seed = seed;
    man.checkpoint = o.checkpoints[i];
    man.best_step = cks[i].step;
    if (extra.contains("job")) man.config_digest = hex_digest(digest(extra["job"].dump()));
    rep.manifests.push_back(man);
  }
  rep.seeds.assign(seeds.begin(), seeds.end());
  out << report_table(rep);
  if (!o.out.empty()) {
    const bool complete = emit_report(rep, o.out);
    out << "wrote report to " << o.out << '\n';
    if (!complete) return kExitIncomplete;
  }
  return rep.complete() ? kExitOk : kExitIncomplete;
}

inline int cmd_report(CliOptions& o, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  const std::string in_dir = o.input.empty() ? require_out(o) : o.input;
  const auto csv_path = fs::path(in_dir) / "results.csv";
  std::ifstream in(csv_path);
  if (!in) throw UsageError("no results.csv in " + in_dir);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string experiment = o.experiment;
  const auto preset_path = fs::path(in_dir) / "preset.json";
  std::optional<nlohmann::json> preset;
  if (fs::exists(preset_path)) {
    std::ifstream pin(preset_path);
    preset = nlohmann::json::parse(pin);
    const auto stored = (*preset)["experiment"].get<std::string>();
    if (!experiment.empty() && experiment != stored) {
      throw ConfigError("conflict: --experiment " + experiment + " but " + preset_path.string() + " says " + stored);
    }
    experiment = stored;
  }
  if (experiment.empty()) experiment = "exp1";
  auto rep = parse_report_csv(ss.str(), experiment);
  if (preset) {
    // The preset fixes the full grid so cells absent from the CSV show as gaps.
    rep.methods.clear();
    for (const auto& id : (*preset)["methods"]) rep.methods.push_back(parse_method_id(id.get<std::string>(), rep.multitask));
    rep.envs = (*preset)["eval_envs"].get<std::vector<double>>();
    rep.ks = (*preset)["k_grid"].get<std::vector<std::size_t>>();
    rep.seeds = (*preset)["seeds"].get<std::vector<std::uint64_t>>();
  }
  const auto man_path = fs::path(in_dir) / "manifests.json";
  if (fs::exists(man_path)) {
    std::ifstream min(man_path);
    for (const auto& m : nlohmann::json::parse(min)) {
      RunManifest man;
      man.method = m.value("method", "");
      man.seed = m.value("seed", std::uint64_t{0});
      man.config_digest = m.value("config_digest", "");
      man.log_digest = m.value("log_digest", "");
      man.checkpoint = m.value("checkpoint", "");
      man.build = m.value("build", "unknown");
      man.best_step = m.value("best_step", 0L);
      man.best_validation = m.value("best_validation", 0.0);
      rep.manifests.push_back(man);
    }
  }
  const auto oracle_path = fs::path(in_dir) / "oracle.json";
  if (fs::exists(oracle_path)) {
    std::ifstream oin(oracle_path);
    for (const auto& v : nlohmann::json::parse(oin)) rep.oracle[v.at("env").get<double>()] = v.at("loss").get<double>();
  }
  const std::string out_dir = o.out.empty() ? in_dir : o.out;
  const bool complete = emit_report(rep, out_dir);
  out << report_table(rep);
  if (!rep.methods.empty() && !rep.envs.empty() && !rep.ks.empty()) out << '\n' << risk_table(rep);
  if (!complete) {
    err << "report is incomplete: missing cells are marked -- in " << (fs::path(out_dir) / "table.txt").string() << '\n';
    return kExitIncomplete;
  }
  return kExitOk;
}

inline int cmd_repro(CliOptions& o, const std::string& experiment, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  if (!o.experiment.empty() && o.experiment != experiment) {
    throw ConfigError("conflict: repro " + experiment + " but --experiment " + o.experiment);
  }
  o.experiment = experiment;
  if (!o.method.empty() || !o.knowledge.empty() || !o.critic.empty() || !o.representation.empty()) {
    throw ConfigError("conflict: repro runs the whole method matrix; drop --method/--knowledge/--critic/--representation");
  }
  auto r = resolve(o);
  const auto dir = require_out(o);
  // --seed picks the first seed; the preset's seed count is kept.
  if (o.seed) {
    for (std::size_t i = 0; i < r.preset.seeds.size(); ++i) r.preset.seeds[i] = *o.seed + i;
  }
  CliOptions gen = o;
  gen.out = (fs::path(dir) / "data").string();
  for (auto s : r.preset.seeds) {
    gen.seed = s;
    gen.out = (fs::path(dir) / "data" / ("seed" + std::to_string(s))).string();
    std::ostringstream sink;
    cmd_gen(gen, sink);
  }
  ExperimentOptions eo;
  eo.out_dir = dir;
  eo.jobs = o.jobs;
  eo.progress = [&](const std::string& msg) { err << "[" << experiment << "] " << msg << std::endl; };
  const auto res = run_experiment(r.preset, eo);
  const bool complete = emit_report(res.report, dir);
  out << report_table(res.report) << '\n' << risk_table(res.report);
  out << "artifacts in " << dir << '\n';
  return complete ? kExitOk : kExitIncomplete;
}

}  // namespace detail_cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CliOptions o;
  CLI::App app{"rime: robust informed meta-learning experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", o.config, "key=value config file with [run], [exp1], [exp2] sections");
  app.add_option("--seed", o.seed, "seed (repro: first seed)");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--experiment", o.experiment, "exp1 or exp2 (default exp1)")->check(CLI::IsMember({"exp1", "exp2"}));
  app.add_option("--method", o.method, "np, inp, rime, or a full method id such as rime-k-k-learned");
  app.add_option("--knowledge", o.knowledge, "on or off (rime only)")->check(CLI::IsMember({"on", "off"}));
  app.add_option("--critic", o.critic, "uninformed, k or c (rime only)")->check(CLI::IsMember({"uninformed", "k", "c"}));
  app.add_option("--representation", o.representation, "learned or optimal (rime only)")
      ->check(CLI::IsMember({"learned", "optimal"}));
  app.add_option("--mi-form", o.mi_form, "log or ratio")->check(CLI::IsMember({"log", "ratio"}));
  app.add_flag("--fast", o.fast, "3 seeds and shorter training");
  app.add_option("--jobs", o.jobs, "concurrent training runs")->check(CLI::PositiveNumber);
  app.add_flag("--per-point", o.per_point, "report per-point mean loss instead of the sum over targets");

  auto* gen = app.add_subcommand("gen", "write the training pool and evaluation datasets");
  auto* train = app.add_subcommand("train", "train one method at one seed");
  auto* eval = app.add_subcommand("eval", "k-shot evaluation of checkpoints");
  eval->add_option("--checkpoint", o.checkpoints, "checkpoint file (repeatable)");
  auto* report = app.add_subcommand("report", "tables, CSV and plots from a results directory");
  report->add_option("--in", o.input, "results directory (default: --out)");
  auto* repro = app.add_subcommand("repro", "full pipeline for one experiment");
  std::string repro_exp;
  repro->add_option("experiment", repro_exp, "exp1 or exp2")->required()->check(CLI::IsMember({"exp1", "exp2"}));
  for (auto* sub : {gen, train, eval, report, repro}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) return detail_cli::cmd_gen(o, out);
    if (*train) return detail_cli::cmd_train(o, out);
    if (*eval) return detail_cli::cmd_eval(o, out);
    if (*report) return detail_cli::cmd_report(o, out, err);
    if (*repro) return detail_cli::cmd_repro(o, repro_exp, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace rime
