#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "rime/datagen.hpp"
#include "rime/numcore/stats.hpp"

using namespace rime;

namespace {

GeneratorConfig single_task() { return GeneratorConfig{}; }

GeneratorConfig multitask() {
  GeneratorConfig cfg;
  cfg.multitask = true;
  return cfg;
}

TaskDataset draw(std::uint64_t seed, double e, std::size_t n, std::optional<double> b = std::nullopt) {
  Rng rng(seed);
  TaskParams t{b, 0};
  return sample_task(rng, {e}, t, n, b ? multitask() : single_task());
}

}  // namespace

TEST(SampleTask, NuisanceMeanFollowsEnvironment) {
  const auto d = draw(1, 0.5, 100000);
  std::vector<double> z1;
  for (const auto& s : d.samples)
    if (s.y == 1) z1.push_back(s.z);
  EXPECT_NEAR(sample_mean(z1), 0.5, 3.0 * standard_error(z1));
}

TEST(SampleTask, NoNuisanceCorrelationAtZeroEnvironment) {
  const auto d = draw(2, 0.0, 10000);
  std::vector<double> z, sy;
  for (const auto& s : d.samples) {
    z.push_back(s.z);
    sy.push_back(2.0 * s.y - 1.0);
  }
  EXPECT_LT(std::abs(pearson_correlation(z, sy)), 0.03);
}

TEST(SampleTask, SumOfCoordinatesCancelsNuisance) {
  const auto d = draw(3, 0.5, 200000);
  std::vector<double> sums;
  for (const auto& s : d.samples)
    if (s.y == 1) sums.push_back(s.x[0] + s.x[1]);
  ASSERT_GT(sums.size(), 90000u);
  EXPECT_NEAR(sample_mean(sums), 6.0, 3.0 * standard_error(sums));
}

TEST(SampleTask, LabelsAreBinaryAndBalanced) {
  const auto d = draw(4, -0.9, 20000);
  double ones = 0;
  for (const auto& s : d.samples) {
    ASSERT_TRUE(s.y == 0 || s.y == 1);
    ones += s.y;
  }
  EXPECT_NEAR(ones / 20000.0, 0.5, 0.015);
}

TEST(SampleTask, RequiresAtLeastOnePoint) {
  Rng rng(5);
  EXPECT_THROW(sample_task(rng, {0.5}, {}, 0, single_task()), UsageError);
}

TEST(SampleTask, StandardDeviationReadingIsAvailable) {
  GeneratorConfig cfg;
  cfg.second_arg_is_variance = false;
  EXPECT_DOUBLE_EQ(cfg.x1_sd(), 9.0);
  EXPECT_DOUBLE_EQ(cfg.x2_sd(), 0.01);
  EXPECT_DOUBLE_EQ(GeneratorConfig{}.x1_sd(), 3.0);
}

// x | (y, z, b) does not depend on e: residuals around the mechanism means
// have the same first two moments in both environments.
TEST(SampleTask, OutcomeMechanismIsStableAcrossEnvironments) {
  for (double b : {0.0, 1.3}) {
    std::array<std::vector<double>, 2> r1, r2;
    int idx = 0;
    for (double e : {0.5, -0.9}) {
      const auto d = draw(10 + idx, e, 60000, b);
      for (const auto& s : d.samples) {
        r1[idx].push_back(s.x[0] - (b + 3.0 * s.y - s.z));
        r2[idx].push_back(s.x[1] - (b + 3.0 * s.y + s.z));
      }
      ++idx;
    }
    auto var = [](const std::vector<double>& v) {
      const double m = sample_mean(v);
      double s = 0;
      for (double x : v) s += (x - m) * (x - m);
      return s / (v.size() - 1);
    };
    EXPECT_NEAR(sample_mean(r1[0]) - sample_mean(r1[1]), 0.0,
                3.0 * std::hypot(standard_error(r1[0]), standard_error(r1[1])));
    EXPECT_NEAR(sample_mean(r2[0]) - sample_mean(r2[1]), 0.0,
                3.0 * std::hypot(standard_error(r2[0]), standard_error(r2[1])));
    EXPECT_NEAR(var(r1[0]) / var(r1[1]), 1.0, 0.04);
    EXPECT_NEAR(var(r2[0]) / var(r2[1]), 1.0, 0.04);
    EXPECT_NEAR(var(r1[0]), 9.0, 0.25);
    EXPECT_NEAR(var(r2[0]), 0.01, 0.0003);
  }
}

// x* | y ~ N(2b + 6y, 9.01) whatever the environment (b enters both coordinates).
TEST(SampleTask, OptimalRepresentationMomentsIgnoreEnvironment) {
  int seed = 20;
  for (double e : {0.5, 0.0, -0.9}) {
    const double b = -0.7;
    const auto d = draw(seed++, e, 100000, b);
    std::array<std::vector<double>, 2> by_y;
    for (const auto& s : d.samples) by_y[s.y].push_back(optimal_representation(s.x));
    for (int y = 0; y < 2; ++y) {
      const auto& v = by_y[y];
      EXPECT_NEAR(sample_mean(v), 2.0 * b + 6.0 * y, 3.0 * standard_error(v)) << "e=" << e;
      double ss = 0;
      const double m = sample_mean(v);
      for (double x : v) ss += (x - m) * (x - m);
      EXPECT_NEAR(ss / (v.size() - 1), 9.01, 0.2) << "e=" << e;
    }
  }
}

TEST(OptimalRepresentation, SumsCoordinates) {
  EXPECT_EQ(optimal_representation({0.0, 0.0}), 0.0);
  EXPECT_EQ(optimal_representation({3.0, -3.0}), 0.0);
  EXPECT_EQ(optimal_representation({1.0, 2.0}), 3.0);
}

// The nuisance cancels in x1 + x2, so x* carries nothing about z beyond what
// y already does: I[x*; z | y] = 0 at every e, and I[x*; z] = 0 at e = 0.
TEST(OptimalRepresentation, CarriesNoNuisanceInformation) {
  int seed = 30;
  for (double e : {0.5, -0.9, 0.0}) {
    const auto d = draw(seed++, e, 100000);
    std::array<std::vector<double>, 2> xs, z;
    for (const auto& s : d.samples) {
      xs[s.y].push_back(optimal_representation(s.x));
      z[s.y].push_back(s.z);
    }
    const double n = static_cast<double>(d.size());
    const double cmi = (xs[0].size() / n) * binned_mi(xs[0], z[0]) + (xs[1].size() / n) * binned_mi(xs[1], z[1]);
    EXPECT_LT(cmi, 0.01) << "e=" << e;
  }
  {
    const auto d = draw(98, 0.0, 100000);
    std::vector<double> xs, z;
    for (const auto& s : d.samples) {
      xs.push_back(optimal_representation(s.x));
      z.push_back(s.z);
    }
    EXPECT_LT(binned_mi(xs, z), 0.01);
  }
  // Sanity: x2 alone carries plenty.
  const auto d = draw(99, 0.5, 100000);
  std::vector<double> x2, z;
  for (const auto& s : d.samples) {
    x2.push_back(s.x[1]);
    z.push_back(s.z);
  }
  EXPECT_GT(binned_mi(x2, z), 0.3);
}

TEST(ExtractKnowledge, Modes) {
  EXPECT_TRUE(extract_knowledge({1.7, 0}, KnowledgeMode::kNone).empty());
  EXPECT_EQ(extract_knowledge({1.7, 0}, KnowledgeMode::kOffsetB), std::vector<double>{1.7});
  EXPECT_EQ(extract_knowledge({-2.0, 0}, KnowledgeMode::kOffsetB), std::vector<double>{-2.0});
  EXPECT_THROW(extract_knowledge({std::nullopt, 0}, KnowledgeMode::kOffsetB), UsageError);
}

TEST(ExtractKnowledge, IndependentOfEnvironment) {
  TaskParams t{0.9, 3};
  Rng a(1), b(2);
  const auto d1 = sample_task(a, {0.5}, t, 10, multitask());
  const auto d2 = sample_task(b, {-0.9}, t, 10, multitask());
  EXPECT_EQ(d1.knowledge, d2.knowledge);
  EXPECT_EQ(d1.knowledge, std::vector<double>{0.9});
}

TEST(SampleTaskParams, OffsetsStayInRange) {
  Rng rng(7);
  for (int i = 0; i < 5000; ++i) {
    const auto t = sample_task_params(rng, i, multitask());
    ASSERT_TRUE(t.b.has_value());
    EXPECT_GE(*t.b, -2.0);
    EXPECT_LE(*t.b, 2.0);
  }
  EXPECT_FALSE(sample_task_params(rng, 0, single_task()).b.has_value());
}

TEST(MakeEpisode, EmptyContext) {
  Rng rng(8);
  const auto d = draw(8, 0.5, 1000);
  const auto ep = make_episode(rng, d, std::size_t{0});
  EXPECT_TRUE(ep.context.empty());
  EXPECT_EQ(ep.target.size(), 1000u);
}

TEST(MakeEpisode, ContextIsDistinctSubsetOfTarget) {
  Rng rng(9);
  const auto d = draw(9, 0.5, 1000);
  const auto ep = make_episode(rng, d, std::size_t{100});
  ASSERT_EQ(ep.context.size(), 100u);
  std::set<std::size_t> target(ep.target.begin(), ep.target.end());
  std::set<std::size_t> ctx(ep.context.begin(), ep.context.end());
  EXPECT_EQ(ctx.size(), 100u);
  EXPECT_TRUE(std::includes(target.begin(), target.end(), ctx.begin(), ctx.end()));
}

TEST(MakeEpisode, ReplayIsDeterministic) {
  const auto d = draw(10, 0.5, 1000);
  Rng a(77), b(77);
  for (int i = 0; i < 5; ++i) {
    const auto e1 = make_episode(a, d, SampledContextSize{});
    const auto e2 = make_episode(b, d, SampledContextSize{});
    EXPECT_EQ(e1.context, e2.context);
  }
}

TEST(MakeEpisode, SampledSizesCoverTheRange) {
  const auto d = draw(11, 0.5, 1000);
  Rng rng(12);
  std::size_t lo = 1000, hi = 0;
  for (int i = 0; i < 3000; ++i) {
    const auto ep = make_episode(rng, d, SampledContextSize{0, 100});
    lo = std::min(lo, ep.context.size());
    hi = std::max(hi, ep.context.size());
  }
  EXPECT_EQ(lo, 0u);
  EXPECT_EQ(hi, 100u);
}

TEST(MakeEpisode, OversizedContextIsUsageError) {
  Rng rng(13);
  const auto d = draw(13, 0.5, 50);
  EXPECT_THROW(make_episode(rng, d, std::size_t{51}), UsageError);
}

TEST(DatasetFile, RoundTrip) {
  Rng rng(14);
  std::vector<TaskDataset> tasks;
  for (int i = 0; i < 3; ++i) tasks.push_back(sample_task(rng, {0.5}, sample_task_params(rng, i, multitask()), 7, multitask()));
  tasks[1].weights[2] = 2.5;
  const auto path = (std::filesystem::temp_directory_path() / "rime_dataset_roundtrip.jsonl").string();
  write_dataset(path, {{"seed", 14}, {"generator", generator_config_json(multitask())}}, tasks);
  const auto back = read_dataset(path);
  EXPECT_EQ(back.manifest.at("seed").get<int>(), 14);
  ASSERT_EQ(back.tasks.size(), 3u);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(back.tasks[t].task.b, tasks[t].task.b);
    EXPECT_EQ(back.tasks[t].knowledge, tasks[t].knowledge);
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_EQ(back.tasks[t].samples[i].x, tasks[t].samples[i].x);
      EXPECT_EQ(back.tasks[t].samples[i].z, tasks[t].samples[i].z);
      EXPECT_EQ(back.tasks[t].weights[i], tasks[t].weights[i]);
    }
  }
  std::filesystem::remove(path);
}
