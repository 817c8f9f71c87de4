#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "rime/numcore.hpp"
#include "test_oracles.hpp"

using namespace rime;

namespace {

Matrix random_matrix(Rng& rng, Index r, Index c) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST(ForwardMlp, ZeroWeightsGiveZeroOutput) {
  Rng rng(1);
  Mlp net(MlpSpec{3, {5, 4}, 2, Activation::kTanh, OutputHead::kLinear}, rng);
  net.zero_parameters();
  Tensor out = net.forward(Tensor::constant(random_matrix(rng, 7, 3)));
  EXPECT_EQ(out.rows(), 7);
  EXPECT_EQ(out.cols(), 2);
  EXPECT_EQ(out.value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(ForwardMlp, IdentityLinearLayerIsIdentity) {
  Rng rng(2);
  Mlp net(MlpSpec{3, {}, 3, Activation::kTanh, OutputHead::kLinear}, rng);
  net.weight(0).mutable_value() = Matrix::Identity(3, 3);
  Matrix v = random_matrix(rng, 4, 3);
  EXPECT_EQ(net.forward(Tensor::constant(v)).value(), v);
}

TEST(ForwardMlp, MatchesStraightLineReevaluation) {
  Rng rng(3);
  Mlp net(MlpSpec{2, {16}, 1, Activation::kTanh, OutputHead::kLinear}, rng);
  Matrix x = random_matrix(rng, 10, 2);
  Matrix out = net.forward(Tensor::constant(x)).value();
  for (Index n = 0; n < x.rows(); ++n) {
    const double expect = oracle::mlp_2_h_1_tanh(net.weight(0).value(), net.bias(0).value(), net.weight(1).value(),
                                                 net.bias(1).value(), x(n, 0), x(n, 1));
    EXPECT_NEAR(out(n, 0), expect, 1e-12);
  }
}

TEST(ForwardMlp, ShapeMismatchIsConfigError) {
  Rng rng(4);
  Mlp net(MlpSpec{2, {4}, 1, Activation::kRelu, OutputHead::kLinear}, rng);
  EXPECT_THROW(net.forward(Tensor::constant(Matrix::Zero(3, 5))), ConfigError);
}

TEST(ForwardMlp, GaussianHeadEmitsTwiceTheOutputWidth) {
  Rng rng(5);
  Mlp net(MlpSpec{2, {4}, 3, Activation::kSoftplus, OutputHead::kGaussian}, rng);
  EXPECT_EQ(net.forward(Tensor::constant(Matrix::Zero(2, 2))).cols(), 6);
}

TEST(Backward, SquareAtThree) {
  Tensor x = Tensor::parameter(Matrix::Constant(1, 1, 3.0));
  backward(ops::sum(ops::square(x)));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 6.0);
}

TEST(Backward, SoftplusAtZero) {
  Tensor x = Tensor::parameter(Matrix::Constant(1, 1, 0.0));
  backward(ops::sum(ops::softplus(x)));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 0.5);
}

TEST(Backward, NonScalarLossIsUsageError) {
  Tensor x = Tensor::parameter(Matrix::Constant(2, 1, 1.0));
  EXPECT_THROW(backward(ops::square(x)), UsageError);
}

TEST(Backward, ParametersOffTheGraphGetZeroGrad) {
  Tensor used = Tensor::parameter(Matrix::Constant(1, 1, 2.0));
  Tensor unused = Tensor::parameter(Matrix::Constant(1, 1, 2.0));
  Tensor first = ops::sum(ops::mul(used, unused));
  backward(first);
  ASSERT_NE(unused.grad()(0, 0), 0.0);
  std::vector<Tensor> params{used, unused};
  backward(ops::sum(ops::square(used)), params);
  EXPECT_EQ(unused.grad()(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(used.grad()(0, 0), 4.0);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::parameter(Matrix::Constant(1, 1, 1.5));
  Tensor y = ops::tanh(x);
  backward(ops::sum(ops::mul(y, y)));
  const double t = std::tanh(1.5);
  EXPECT_NEAR(x.grad()(0, 0), 2.0 * t * (1.0 - t * t), 1e-15);
}

// Random networks over every activation and head, summed into a scalar through
// a fixed random projection; gradients against central differences.
TEST(Backward, MatchesFiniteDifferencesAcrossArchitectures) {
  Rng rng(11);
  for (int trial = 0; trial < 24; ++trial) {
    const auto cfg = oracle::random_mlp_config(rng, trial);
    const double err = oracle::mlp_gradient_relative_error(cfg, rng);
    EXPECT_LT(err, 1e-4) << "trial " << trial << " activation " << to_string(cfg.spec.activation);
  }
}

TEST(Backward, FusedOpsMatchFiniteDifferences) {
  Rng rng(12);
  const Index n = 5, d = 3;
  Matrix target = random_matrix(rng, n, d);
  std::vector<Tensor> params{Tensor::parameter(random_matrix(rng, n, d)),
                             Tensor::parameter(random_matrix(rng, n, d).cwiseAbs().array() + 0.5),
                             Tensor::parameter(random_matrix(rng, n, d)),
                             Tensor::parameter(random_matrix(rng, n, d).cwiseAbs().array() + 0.5)};
  std::vector<Index> seg{0, 1, 0, 2, 1};
  std::vector<double> w{0.5, 2.0, 1.0, 3.0, 0.0};
  auto loss_fn = [&]() {
    Tensor nll = ops::gaussian_nll(target, params[0], params[1]);
    Tensor kl = ops::kl_diag(params[0], params[1], params[2], params[3]);
    Tensor seg_mean = ops::segment_reduce(ops::tanh(params[2]), seg, w, 3, true);
    Tensor bce = ops::bce_with_logits(params[2], (target.array() > 0.0).cast<double>().matrix());
    std::vector<Index> gidx{2, 0, 0, 1};
    Tensor gathered = ops::gather_rows(seg_mean, gidx);
    return ops::add(ops::add(ops::sum(nll), ops::sum(kl)),
                    ops::add(ops::sum(ops::square(gathered)), ops::mean(bce)));
  };
  const double err = oracle::finite_difference_relative_error(params, loss_fn);
  EXPECT_LT(err, 1e-6);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor p = Tensor::parameter(Matrix::Constant(2, 2, 0.7));
  std::vector<Tensor> params{p};
  AdamState st = make_adam(params, 0.1);
  p.zero_grad();
  for (int i = 0; i < 5; ++i) adam_step(st, params);
  EXPECT_EQ(p.value(), Matrix::Constant(2, 2, 0.7));
  EXPECT_EQ(st.t, 5);
}

TEST(Adam, ConstantGradientMovesAgainstItsSign) {
  Tensor p = Tensor::parameter(Matrix::Constant(1, 2, 0.0));
  std::vector<Tensor> params{p};
  AdamState st = make_adam(params, 0.01);
  double prev0 = 0.0, prev1 = 0.0;
  for (int i = 0; i < 50; ++i) {
    backward(ops::sum(ops::mul(p, Tensor::constant(Matrix{{2.0, -3.0}}))));
    adam_step(st, params);
    EXPECT_LT(p.value()(0, 0), prev0);
    EXPECT_GT(p.value()(0, 1), prev1);
    prev0 = p.value()(0, 0);
    prev1 = p.value()(0, 1);
  }
}

TEST(Adam, QuadraticBowlMatchesLiteralTranscription) {
  Tensor p = Tensor::parameter(Matrix{{1.0, 1.0}});
  std::vector<Tensor> params{p};
  AdamState st = make_adam(params, 0.1);
  for (int i = 0; i < 100; ++i) {
    backward(ops::sum(ops::square(p)), params);
    adam_step(st, params);
  }
  const auto literal = oracle::literal_adam_on_bowl({1.0, 1.0}, 0.1, 100);
  EXPECT_NEAR(p.value()(0, 0), literal[0], 1e-12);
  EXPECT_NEAR(p.value()(0, 1), literal[1], 1e-12);
  const double loss = p.value().squaredNorm();
  EXPECT_LT(loss, 1e-3);
}

TEST(Adam, NaNGradientNamesTheParameter) {
  Tensor a = Tensor::parameter(Matrix::Constant(1, 1, 1.0));
  Tensor b = Tensor::parameter(Matrix::Constant(1, 1, -1.0));
  std::vector<Tensor> params{a, b};
  std::vector<std::string> names{"enc.w0", "dec.b1"};
  AdamState st = make_adam(params, 0.1);
  backward(ops::sum(ops::add(a, b)), params);
  const_cast<Matrix&>(b.grad())(0, 0) = std::nan("");
  try {
    adam_step(st, params, names);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("dec.b1"), std::string::npos);
  }
  EXPECT_EQ(a.value()(0, 0), 1.0);
}

TEST(GaussianLogProb, StandardNormalAtZero) {
  std::vector<double> x{0.0};
  EXPECT_NEAR(gaussian_log_prob(x, {{0.0}, {1.0}}), -0.9189385, 1e-7);
}

TEST(GaussianLogProb, AtTheMeanOnlyTheNormaliserRemains) {
  for (double v : {0.01, 0.5, 3.0, 40.0}) {
    std::vector<double> x{1.25};
    EXPECT_NEAR(gaussian_log_prob(x, {{1.25}, {v}}), -0.5 * std::log(2.0 * std::numbers::pi * v), 1e-14);
  }
}

TEST(GaussianLogProb, ClosedFormAtTwoUnderVarianceFour) {
  std::vector<double> x{2.0};
  const double closed = -0.5 * std::log(2.0 * std::numbers::pi * 4.0) - 4.0 / 8.0;
  EXPECT_NEAR(gaussian_log_prob(x, {{0.0}, {4.0}}), closed, 1e-14);
}

TEST(GaussianLogProb, NonPositiveVarianceIsDomainError) {
  std::vector<double> x{0.0};
  EXPECT_THROW(gaussian_log_prob(x, {{0.0}, {0.0}}), DomainError);
  EXPECT_THROW(kl_diag_gaussians({{0.0}, {1.0}}, {{0.0}, {-1.0}}), DomainError);
}

TEST(KlDiagGaussians, IdenticalIsZero) {
  DiagonalGaussian q{{0.3, -1.0}, {0.2, 4.0}};
  EXPECT_EQ(kl_diag_gaussians(q, q), 0.0);
}

TEST(KlDiagGaussians, UnitShiftIsOneHalf) {
  EXPECT_DOUBLE_EQ(kl_diag_gaussians({{1.0}, {1.0}}, {{0.0}, {1.0}}), 0.5);
}

TEST(KlDiagGaussians, MatchesMonteCarloEstimate) {
  Rng rng(21);
  DiagonalGaussian q{{0.4, -0.7, 1.1}, {0.6, 1.8, 0.3}};
  DiagonalGaussian p{{-0.2, 0.1, 0.9}, {1.2, 0.9, 0.5}};
  const auto [mc, se] = oracle::monte_carlo_kl(q, p, 1'000'000, rng);
  EXPECT_NEAR(kl_diag_gaussians(q, p), mc, 3.0 * se);
}

TEST(KlDiagGaussians, ZeroIffIdenticalOnRandomPairs) {
  Rng rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    DiagonalGaussian q{{rng.normal(), rng.normal()}, {rng.uniform(0.1, 3.0), rng.uniform(0.1, 3.0)}};
    DiagonalGaussian p = q;
    EXPECT_LE(std::abs(kl_diag_gaussians(q, p)), 1e-12);
    p.mean[trial % 2] += rng.uniform(0.01, 1.0);
    EXPECT_GT(kl_diag_gaussians(q, p), 0.0);
    p = q;
    p.variance[trial % 2] *= rng.uniform(1.05, 2.0);
    EXPECT_GT(kl_diag_gaussians(q, p), 0.0);
  }
}

TEST(GaussianHead, VarianceNeverBelowFloor) {
  Rng rng(23);
  Mlp net(MlpSpec{2, {8}, 2, Activation::kTanh, OutputHead::kGaussian}, rng);
  net.bias(1).mutable_value().rightCols(2).setConstant(-200.0);
  Matrix x = random_matrix(rng, 64, 2) * 50.0;
  auto g = net.forward_gaussian(Tensor::constant(x));
  EXPECT_GE(g.var.value().minCoeff(), kVarianceFloor);
  for (int trial = 0; trial < 50; ++trial) {
    Mlp r(MlpSpec{2, {8}, 2, Activation::kRelu, OutputHead::kGaussian}, rng);
    auto out = r.forward_gaussian(Tensor::constant(random_matrix(rng, 16, 2) * 100.0));
    EXPECT_GE(out.var.value().minCoeff(), kVarianceFloor);
  }
}

TEST(ExactDiscreteMi, IndependentUniformIsZero) {
  EXPECT_EQ(exact_discrete_mi({2, 2, 1, {0.25, 0.25, 0.25, 0.25}}), 0.0);
}

TEST(ExactDiscreteMi, PerfectlyCorrelatedBitsIsLnTwo) {
  EXPECT_NEAR(exact_discrete_mi({2, 2, 1, {0.5, 0.0, 0.0, 0.5}}), std::numbers::ln2, 1e-15);
}

TEST(ExactDiscreteMi, InvalidTableIsDomainError) {
  EXPECT_THROW(exact_discrete_mi({2, 2, 1, {0.5, 0.5, 0.5, -0.5}}), DomainError);
  EXPECT_THROW(exact_discrete_mi({2, 2, 1, {0.3, 0.3, 0.3, 0.3}}), DomainError);
  EXPECT_THROW(exact_conditional_mi({2, 2, 2, {0.5, 0.5}}), DomainError);
}

TEST(ExactDiscreteMi, ChainRuleOnRandomJoints) {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const DiscreteJoint j = oracle::random_joint(rng, 1 + rng.index(4), 1 + rng.index(4), 1 + rng.index(4));
    // I[(A,B);C] = I[A;C|B] + I[B;C]
    EXPECT_NEAR(exact_joint_mi(j), exact_conditional_mi(j) + exact_mi_bc(j), 1e-12);
    // Same identity with the roles of A and B exchanged.
    const DiscreteJoint swapped = permute_axes(j, {1, 0, 2});
    EXPECT_NEAR(exact_joint_mi(j), exact_conditional_mi(swapped) + exact_mi_bc(swapped), 1e-12);
    EXPECT_GE(exact_conditional_mi(j), -1e-15);
  }
}

TEST(Stats, BinnedMiNearZeroForIndependentAndLargeForDependent) {
  Rng rng(41);
  std::vector<double> a(20000), b(20000), c(20000);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
    c[i] = a[i] + 0.3 * rng.normal();
  }
  EXPECT_LT(binned_mi(a, b), 0.01);
  EXPECT_GT(binned_mi(a, c), 0.5);
}
