#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rime/harness.hpp"

using namespace rime;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

/// Report over the given methods with loss = f(method index, env, k, seed).
template <class F>
EvalReport synthetic_report(const std::vector<MethodSpec>& methods, std::vector<double> envs, std::vector<std::size_t> ks,
                            std::size_t seeds, F f, bool multitask = false) {
  EvalReport r;
  r.experiment = multitask ? "exp2" : "exp1";
  r.multitask = multitask;
  r.methods = methods;
  r.envs = std::move(envs);
  r.ks = std::move(ks);
  for (std::uint64_t s = 0; s < seeds; ++s) r.seeds.push_back(s);
  for (std::size_t m = 0; m < methods.size(); ++m)
    for (double e : r.envs)
      for (auto k : r.ks)
        for (auto s : r.seeds) r.records.push_back({methods[m].id(), s, e, k, f(m, e, k, s)});
  return r;
}

/// Tiny preset that trains in well under a second per run.
ExperimentPreset tiny_preset(const std::string& name) {
  auto p = make_preset(name, true);
  p.base.model.hidden = {8};
  p.base.model.embed_dim = 8;
  p.base.model.d_c = 2;
  p.base.model.d_r = 2;
  p.base.critic.hidden = {8};
  p.base.critic.batch_rows = 64;
  p.base.critic.updates_per_step = 2;
  p.base.train.steps = 6;
  p.base.train.eval_interval = 3;
  p.base.train.warmup = 2;
  p.base.train.meta_batch = 2;
  p.base.train.pool_tasks = 10;
  p.base.train.points_per_task = 40;
  p.base.train.validation_samples = 2;
  p.base.weight_model.epochs = 5;
  p.seeds = {0, 1};
  p.k_grid = {3, 100};
  p.eval.tasks = 2;
  p.eval.targets = 50;
  p.eval.latent_samples = 2;
  return p;
}

}  // namespace

TEST(Preset, Exp1HasNoKnowledgeArmsAndNoTaskVariability) {
  const auto p = make_preset("exp1", false);
  EXPECT_FALSE(p.multitask());
  EXPECT_EQ(p.seeds.size(), 10u);
  ASSERT_EQ(p.methods.size(), 3u);
  for (const auto& m : p.methods) EXPECT_FALSE(m.knowledge());
  EXPECT_EQ(p.eval_envs, (std::vector<double>{0.5, -0.9}));
  EXPECT_EQ(p.k_grid, (std::vector<std::size_t>{3, 5, 10, 20, 50, 100}));
  EXPECT_EQ(make_preset("exp1", true).seeds.size(), 3u);
  EXPECT_THROW(make_preset("exp3", false), UsageError);
}

TEST(Preset, Exp2CoversEveryTableRow) {
  const auto p = make_preset("exp2", false);
  EXPECT_TRUE(p.multitask());
  std::vector<std::string> labels;
  for (const auto& m : p.methods) labels.push_back(m.label);
  const std::vector<std::string> expected{
      "Neural Process (no knowledge)",
      "Informed Neural Process (knowledge of b)",
      "RIME (opt. rep, no knowledge, uninformed critic)",
      "RIME (opt. rep, knowledge of b, uninformed critic)",
      "RIME (opt. rep, knowledge of b, c-informed critic)",
      "RIME (no knowledge, uninformed critic)",
      "RIME (knowledge of b, uninformed critic)",
      "RIME (knowledge of b, k-informed critic)",
      "RIME (knowledge of b, c-informed critic)"};
  EXPECT_EQ(labels, expected);
}

TEST(Preset, MethodIdsRoundTrip) {
  for (const char* name : {"exp1", "exp2"}) {
    const auto p = make_preset(name, true);
    std::set<std::string> ids;
    for (const auto& m : p.methods) {
      EXPECT_EQ(parse_method_id(m.id(), p.multitask()).label, m.label);
      ids.insert(m.id());
    }
    EXPECT_EQ(ids.size(), p.methods.size());
  }
  EXPECT_THROW(parse_method_id("rime-x-k-learned", true), ConfigError);
}

TEST(Preset, JobsDifferOnlyWhereTheMethodSays) {
  const auto p = make_preset("exp2", true);
  const auto np = make_job(p, p.methods[0], 4);
  EXPECT_EQ(np.train.lambda, 0.0);
  EXPECT_EQ(np.train.weighting, Weighting::kUniform);
  EXPECT_EQ(np.train.seed, 4u);
  const auto kinf = make_job(p, p.methods[7], 4);
  EXPECT_GT(kinf.train.lambda, 0.0);
  EXPECT_EQ(kinf.train.weighting, Weighting::kEstimated);
  EXPECT_EQ(kinf.model.d_k, 1);
  EXPECT_EQ(kinf.critic.variant, CriticVariant::kKnowledge);
  for (const auto& m : p.methods) EXPECT_NO_THROW(make_job(p, m, 0).validate()) << m.id();
  std::set<std::uint64_t> digests;
  for (const auto& m : p.methods)
    for (auto s : p.seeds) digests.insert(config_digest(make_job(p, m, s)));
  EXPECT_EQ(digests.size(), p.methods.size() * p.seeds.size());
}

TEST(Config, ParsesSectionsAndComments) {
  const auto c = parse_config_text("steps = 10  # top\n[exp1]\nlambda=2\n\n[exp2]\nhidden = 4, 4\n");
  EXPECT_EQ(c.at("").at("steps"), "10");
  EXPECT_EQ(c.at("exp1").at("lambda"), "2");
  auto p = make_preset("exp2", true);
  apply_config(p, c.at("exp2"));
  EXPECT_EQ(p.base.model.hidden, (std::vector<int>{4, 4}));
  apply_config(p, {{"seeds", "2"}, {"per_point", "on"}});
  EXPECT_EQ(p.seeds.size(), 2u);
  EXPECT_TRUE(p.eval.per_point);
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(parse_config_text("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(parse_config_text("novalue\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[open\n"), ConfigError);
  auto p = make_preset("exp1", true);
  EXPECT_THROW(apply_config(p, {{"stepz", "1"}}), ConfigError);
  EXPECT_THROW(apply_config(p, {{"steps", "many"}}), ConfigError);
  EXPECT_THROW(read_config_file("/nonexistent/rime.cfg"), UsageError);
}

TEST(Config, PresetJsonEchoesEveryDefault) {
  const auto j = preset_json(make_preset("exp1", true));
  for (const char* key : {"experiment", "methods", "eval_envs", "k_grid", "seeds", "base_job", "eval"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(j["base_job"].contains("train"));
  EXPECT_TRUE(j["base_job"]["train"].contains("lambda"));
}

TEST(Evaluate, ZeroedModelIgnoresContextSize) {
  const auto p = tiny_preset("exp1");
  Rng rng(1);
  NpModel model(p.base.model, rng);
  for (auto& t : model.parameters()) t.mutable_value().setZero();
  const auto set = make_eval_set(p.base.generator, 0.5, p.eval, 0);
  EXPECT_EQ(evaluate_kshot(model, set, 3, p.eval).mean, evaluate_kshot(model, set, 100, p.eval).mean);
}

TEST(Evaluate, RejectsContextSizesOutsideRange) {
  auto p = tiny_preset("exp1");
  Rng rng(2);
  NpModel model(p.base.model, rng);
  const auto set = make_eval_set(p.base.generator, 0.5, p.eval, 0);
  EXPECT_THROW(evaluate_kshot(model, set, 101, p.eval), UsageError);
  EXPECT_NO_THROW(evaluate_kshot(model, set, 0, p.eval));
}

TEST(Evaluate, CommonRandomNumbersAndPerPointMode) {
  auto p = tiny_preset("exp2");
  Rng rng(3);
  p.base.model.variant = ModelVariant::kINP;
  p.base.model.d_k = 1;
  NpModel model(p.base.model, rng);
  const auto a = make_eval_set(p.base.generator, -0.9, p.eval, 5);
  const auto b = make_eval_set(p.base.generator, -0.9, p.eval, 5);
  ASSERT_EQ(a.tasks.size(), p.eval.tasks);
  EXPECT_EQ(a.tasks[1].samples[7].z, b.tasks[1].samples[7].z);
  EXPECT_NE(a.tasks[0].samples[0].z, make_eval_set(p.base.generator, 0.5, p.eval, 5).tasks[0].samples[0].z);
  const auto sum = evaluate_kshot(model, a, 5, p.eval);
  EXPECT_EQ(sum.mean, evaluate_kshot(model, b, 5, p.eval).mean);
  p.eval.per_point = true;
  EXPECT_NEAR(evaluate_kshot(model, a, 5, p.eval).mean, sum.mean / static_cast<double>(p.eval.targets), 1e-12);
}

TEST(Evaluate, BayesOracleIsEnvironmentInvariant) {
  auto p = make_preset("exp2", true);
  p.eval.tasks = 64;
  const double id = bayes_oracle_loss(make_eval_set(p.base.generator, 0.5, p.eval, 0), p.base.generator, p.eval);
  const double ood = bayes_oracle_loss(make_eval_set(p.base.generator, -0.9, p.eval, 0), p.base.generator, p.eval);
  // Independent oracle: E_y E_{r ~ N(6y, 9.01)} of the Bernoulli log loss, by quadrature.
  const double var = 9.01;
  double expected = 0.0;
  const double dr = 1e-3;
  for (double r = -40.0; r < 46.0; r += dr) {
    const double p1 = std::exp(-(r - 6.0) * (r - 6.0) / (2 * var)), p0 = std::exp(-r * r / (2 * var));
    const double logit = (6.0 * r - 18.0) / var;
    expected += 0.5 * (p1 * std::log1p(std::exp(-logit)) + p0 * std::log1p(std::exp(logit))) / std::sqrt(2 * M_PI * var) * dr;
  }
  EXPECT_NEAR(expected, 0.3566, 1e-3);
  EXPECT_NEAR(id / 1000.0, expected, 0.01);
  EXPECT_NEAR(ood / 1000.0, expected, 0.01);
}

TEST(Risk, MaximumOverEnvironments) {
  const auto methods = make_preset("exp1", true).methods;
  const auto one = synthetic_report(methods, {0.5}, {3, 5}, 2, [](std::size_t m, double, std::size_t k, std::uint64_t) {
    return static_cast<double>(10 * m + k);
  });
  const auto r1 = worst_case_risk(one);
  EXPECT_EQ(r1.risk.at(methods[1].id()), (std::vector<double>{13.0, 15.0}));
  const auto two = synthetic_report(methods, {0.5, -0.9}, {3}, 1, [](std::size_t, double e, std::size_t, std::uint64_t) {
    return e > 0 ? 4.0 : 9.0;
  });
  EXPECT_EQ(worst_case_risk(two).risk.at(methods[0].id())[0], 9.0);
  EvalReport empty;
  EXPECT_THROW(worst_case_risk(empty), UsageError);
}

TEST(Risk, DominatesEveryEnvironmentAndIsMonotoneInEnvironments) {
  Rng rng(7);
  const auto methods = make_preset("exp2", true).methods;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> envs{0.5, -0.9, 0.0, 0.9};
    std::map<std::tuple<std::size_t, double, std::size_t, std::uint64_t>, double> table;
    auto f = [&](std::size_t m, double e, std::size_t k, std::uint64_t s) {
      auto key = std::make_tuple(m, e, k, s);
      if (!table.count(key)) table[key] = rng.normal(0.0, 100.0);
      return table[key];
    };
    const std::vector<std::size_t> ks{3, 10};
    const auto full = synthetic_report(methods, envs, ks, 3, f);
    auto fewer = synthetic_report(methods, {0.5, -0.9, 0.0}, ks, 3, f);
    const auto rf = worst_case_risk(full), rs = worst_case_risk(fewer);
    for (const auto& m : methods)
      for (std::size_t i = 0; i < ks.size(); ++i) {
        EXPECT_GE(rf.risk.at(m.id())[i], rs.risk.at(m.id())[i]);
        for (double e : envs) EXPECT_GE(rf.risk.at(m.id())[i], full.cell(m.id(), e, ks[i]).mean);
      }
  }
}

TEST(Csv, EmptyMethodMatrixGivesHeaderOnly) {
  EvalReport r;
  r.envs = {0.5};
  r.ks = {3};
  r.seeds = {0};
  EXPECT_EQ(report_csv(r), std::string(kCsvHeader) + "\n");
}

TEST(Csv, CardinalityAndRoundTrip) {
  const std::vector<MethodSpec> one{make_preset("exp1", true).methods[0]};
  const auto r = synthetic_report(one, {0.5, -0.9}, {3, 5, 10, 20, 50, 100}, 10,
                                  [](std::size_t, double e, std::size_t k, std::uint64_t s) { return e * 1000.0 + k + 0.1 * s; });
  const auto csv = report_csv(r);
  EXPECT_EQ(count_lines(csv), 121u);
  const auto back = parse_report_csv(csv, "exp1");
  EXPECT_EQ(back.records.size(), 120u);
  EXPECT_EQ(back.ks, r.ks);
  EXPECT_EQ(back.envs, r.envs);
  EXPECT_EQ(report_csv(back), csv);
  EXPECT_THROW(parse_report_csv("bad\n", "exp1"), ConfigError);
}

TEST(Csv, RowCountIsMethodsEnvsKsSeeds) {
  const auto p = make_preset("exp2", true);
  auto r = synthetic_report(p.methods, p.eval_envs, p.k_grid, p.seeds.size(),
                            [](std::size_t, double, std::size_t, std::uint64_t) { return 1.0; }, true);
  r.records.resize(r.records.size() / 2);  // gaps are still listed
  EXPECT_EQ(count_lines(report_csv(r)), 1 + p.methods.size() * p.eval_envs.size() * p.k_grid.size() * p.seeds.size());
}

TEST(Emit, Table1LayoutMatchesGolden) {
  const auto r = synthetic_report(make_preset("exp1", true).methods, {0.5, -0.9}, {3, 5, 10, 20, 50, 100}, 3,
                                  [](std::size_t m, double e, std::size_t k, std::uint64_t s) {
                                    return (m == 0 ? -120.0 : 14.0) * (e > 0 ? 1.0 : -1.0) + 0.01 * k + 0.3 * s;
                                  });
  const auto golden = slurp(std::string(RIME_TEST_DATA_DIR) + "/golden/table1_structure.txt");
  ASSERT_FALSE(golden.empty());
  EXPECT_EQ(mask_values(report_table(r)), golden);
}

TEST(Emit, Table2LayoutMatchesGolden) {
  const auto p = make_preset("exp2", true);
  const auto r = synthetic_report(p.methods, p.eval_envs, p.k_grid, 3,
                                  [](std::size_t m, double, std::size_t k, std::uint64_t) { return 30.0 + m - 0.1 * k; }, true);
  const auto golden = slurp(std::string(RIME_TEST_DATA_DIR) + "/golden/table2_structure.txt");
  ASSERT_FALSE(golden.empty());
  EXPECT_EQ(mask_values(report_table(r)), golden);
}

TEST(Emit, PartialReportHasGapMarkersAndFails) {
  const auto dir = (std::filesystem::temp_directory_path() / "rime_emit_partial").string();
  std::filesystem::remove_all(dir);
  auto r = synthetic_report(make_preset("exp1", true).methods, {0.5, -0.9}, {3, 5}, 2,
                            [](std::size_t, double, std::size_t, std::uint64_t) { return 2.0; });
  EXPECT_TRUE(emit_report(r, dir));
  r.records.erase(std::remove_if(r.records.begin(), r.records.end(),
                                 [](const RunRecord& x) { return x.k == 5 && x.env < 0; }),
                  r.records.end());
  r.records.pop_back();
  EXPECT_FALSE(emit_report(r, dir));
  const auto table = slurp(dir + "/table.txt");
  EXPECT_NE(table.find("--"), std::string::npos);
  EXPECT_NE(table.find("missing cell"), std::string::npos);
  EXPECT_NE(slurp(dir + "/results.csv").find(",NA"), std::string::npos);
  EXPECT_NE(slurp(dir + "/loss_vs_k_e-0.9.svg").find(">gap<"), std::string::npos);
}

TEST(Emit, SvgDashesBaselinesOnly) {
  const auto r = synthetic_report(make_preset("exp1", true).methods, {0.5}, {3, 5}, 1,
                                  [](std::size_t m, double, std::size_t k, std::uint64_t) { return 10.0 * m + k; });
  const auto svg = report_svg(r, 0.5);
  std::size_t dashed = 0, solid = 0;
  std::istringstream in(svg);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("<polyline", 0) != 0) continue;
    (line.find("stroke-dasharray") != std::string::npos ? dashed : solid)++;
  }
  EXPECT_EQ(dashed, 1u);
  EXPECT_EQ(solid, 2u);
}

TEST(Pipeline, DataAccessLedgerOrdersSelectionBeforeEvaluation) {
  const auto p = tiny_preset("exp2");
  auto q = p;
  q.methods = {p.methods[0], p.methods[7]};
  q.seeds = {0};
  const auto res = run_experiment(q);
  ASSERT_EQ(res.access.size(), 2u);
  for (const auto& [key, log] : res.access) {
    const auto& e = log.entries();
    std::size_t select = e.size(), first_eval = e.size();
    for (std::size_t i = 0; i < e.size(); ++i) {
      if (e[i].phase == "select" && select == e.size()) select = i;
      if (e[i].phase == "eval" && first_eval == e.size()) first_eval = i;
      if (e[i].phase == "eval") {
        EXPECT_EQ(e[i].dataset.rfind("eval_", 0), 0u) << key;
      } else {
        EXPECT_EQ(e[i].dataset.find("eval_"), std::string::npos) << key;
      }
    }
    ASSERT_LT(select, e.size()) << key;
    EXPECT_LT(select, first_eval) << key;
    EXPECT_LT(first_eval, e.size()) << key;
  }
  EXPECT_TRUE(res.report.complete());
  EXPECT_EQ(res.report.records.size(), 2u * 2u * 2u);
  EXPECT_EQ(res.report.oracle.size(), 2u);
}

TEST(Pipeline, ThreadedRunMatchesSequential) {
  auto p = tiny_preset("exp1");
  const auto a = run_experiment(p);
  ExperimentOptions opt;
  opt.jobs = 3;
  const auto b = run_experiment(p, opt);
  EXPECT_EQ(report_csv(a.report), report_csv(b.report));
  ASSERT_EQ(a.report.manifests.size(), b.report.manifests.size());
  std::set<std::string> digests;
  for (std::size_t i = 0; i < a.report.manifests.size(); ++i) {
    EXPECT_EQ(a.report.manifests[i].log_digest, b.report.manifests[i].log_digest);
    digests.insert(a.report.manifests[i].config_digest);
  }
  EXPECT_EQ(digests.size(), a.report.manifests.size());
}

TEST(Pipeline, WritesArtifactsToDisk) {
  auto p = tiny_preset("exp1");
  p.seeds = {0};
  p.methods.resize(1);
  const auto dir = (std::filesystem::temp_directory_path() / "rime_pipeline").string();
  std::filesystem::remove_all(dir);
  ExperimentOptions opt;
  opt.out_dir = dir;
  const auto res = run_experiment(p, opt);
  EXPECT_TRUE(emit_report(res.report, dir));
  const auto run = dir + "/runs/np/seed0/";
  for (const char* f : {"log.jsonl", "checkpoint.json", "manifest.json"}) EXPECT_TRUE(std::filesystem::exists(run + f)) << f;
  const auto ck = load_checkpoint(run + "checkpoint.json");
  EXPECT_EQ(ck.step, res.report.manifests[0].best_step);
  const auto lines = read_lines(run + "log.jsonl");
  EXPECT_EQ(select_checkpoint(validation_history(lines)).step, ck.step);
  EXPECT_EQ(parse_report_csv(slurp(dir + "/results.csv"), "exp1").records.size(), res.report.records.size());
  EXPECT_TRUE(std::filesystem::exists(dir + "/preset.json"));
}
