#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "scaffold/gp.hpp"

using namespace scaffold;
using gp::KernelFamily;
using gp::KernelSpec;

namespace {

const KernelFamily kFamilies[] = {KernelFamily::kRbf, KernelFamily::kRatQuad, KernelFamily::kMatern52};

Eigen::MatrixXd column(std::initializer_list<double> v) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) X(i++, 0) = x;
  return X;
}

}  // namespace

TEST(KernelEval, ZeroDistanceGivesVariance) {
  for (auto f : kFamilies) {
    const KernelSpec k{f, 1.7, {0.3, 2.0}, 0.8};
    const std::vector<double> x{0.4, -1.0};
    EXPECT_EQ(gp::kernel_eval(k, x, x), 1.7);
  }
}

TEST(KernelEval, RbfAtUnitDistance) {
  const KernelSpec k{KernelFamily::kRbf, 1.0, {1.0}, 1.0};
  EXPECT_NEAR(gp::kernel_eval(k, std::vector{0.0}, std::vector{1.0}), 0.6065306597126334, 1e-15);
}

TEST(KernelEval, RatQuadLargeAlphaApproachesRbf) {
  const KernelSpec rq{KernelFamily::kRatQuad, 1.0, {1.0}, 1e6};
  const KernelSpec rbf{KernelFamily::kRbf, 1.0, {1.0}, 1.0};
  EXPECT_LT(std::abs(gp::kernel_eval(rq, std::vector{0.0}, std::vector{1.0}) -
                     gp::kernel_eval(rbf, std::vector{0.0}, std::vector{1.0})),
            1e-3);
}

TEST(KernelEval, Matern52ClosedForm) {
  const KernelSpec k{KernelFamily::kMatern52, 2.0, {0.5}, 1.0};
  const double r = 1.0 / 0.5;
  const double expected = 2.0 * (1.0 + std::sqrt(5.0) * r + 5.0 * r * r / 3.0) * std::exp(-std::sqrt(5.0) * r);
  EXPECT_NEAR(gp::kernel_eval(k, std::vector{0.0}, std::vector{1.0}), expected, 1e-14);
}

TEST(KernelEval, DimensionMismatchAndInvalidSpec) {
  const KernelSpec k{KernelFamily::kRbf, 1.0, {1.0, 1.0}, 1.0};
  EXPECT_THROW(gp::kernel_eval(k, std::vector{0.0}, std::vector{1.0}), ValidationError);
  EXPECT_THROW(gp::validate(KernelSpec{KernelFamily::kRbf, 0.0, {1.0}, 1.0}), ValidationError);
  EXPECT_THROW(gp::validate(KernelSpec{KernelFamily::kRbf, 1.0, {-1.0}, 1.0}), ValidationError);
  EXPECT_THROW(gp::validate(KernelSpec{KernelFamily::kRatQuad, 1.0, {1.0}, 0.0}), ValidationError);
}

TEST(KernelFamilyNames, ParseIsCaseInsensitive) {
  EXPECT_EQ(gp::parse_family("ratquad"), KernelFamily::kRatQuad);
  EXPECT_EQ(gp::parse_family("RBF"), KernelFamily::kRbf);
  EXPECT_EQ(gp::parse_family("Matern52"), KernelFamily::kMatern52);
  EXPECT_FALSE(gp::parse_family("linear"));
}

TEST(Gram, SinglePoint) {
  const KernelSpec k{KernelFamily::kRbf, 2.5, {1.0}, 1.0};
  const auto K = gp::gram(k, column({0.3}));
  ASSERT_EQ(K.rows(), 1);
  EXPECT_EQ(K(0, 0), 2.5);
}

TEST(Gram, RandomInputsFactorizeWithJitter) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-2.0, 2.0), l(0.3, 3.0);
  for (int i = 0; i < 50; ++i) {
    const KernelSpec k{kFamilies[i % 3], 1.0, {l(rng), l(rng), l(rng), l(rng)}, 1.5};
    Eigen::MatrixXd X(20, 4);
    for (auto& v : X.reshaped()) v = u(rng);
    const auto K = gp::gram(k, X);
    EXPECT_TRUE(K.isApprox(K.transpose(), 0.0));
    EXPECT_NO_THROW(gp::factorize(K, 0.0));
  }
}

TEST(Factorize, DuplicatePointsNeedOnlyJitter) {
  const KernelSpec k{KernelFamily::kRbf, 1.0, {1.0}, 1.0};
  const auto f = gp::factorize(gp::gram(k, column({0.5, 0.5, 0.5})), 0.0);
  EXPECT_GE(f.jitter, gp::kBaseJitter);
  EXPECT_LE(f.jitter, gp::kMaxJitter);
}

TEST(Factorize, IndefiniteMatrixFails) {
  Eigen::MatrixXd K(2, 2);
  K << 1.0, 2.0, 2.0, 1.0;
  EXPECT_THROW(gp::factorize(K, 0.0), NumericalError);
}

TEST(LogMarginalLikelihood, SinglePoint) {
  const KernelSpec k{KernelFamily::kRbf, 1.0, {1.0}, 1.0};
  const double lml = gp::log_marginal_likelihood(k, 0.0, column({0.0}), Eigen::VectorXd::Zero(1));
  EXPECT_NEAR(lml, -0.5 * std::log(2.0 * std::numbers::pi), 1e-8);
}

TEST(LogMarginalLikelihood, ScalingTargetsOnlyMovesQuadraticTerm) {
  const KernelSpec k{KernelFamily::kRbf, 1.0, {1.0}, 1.0};
  const Eigen::MatrixXd X = column({0.0, 0.7});
  Eigen::VectorXd y(2);
  y << 0.3, -0.4;
  const double diag = 0.01 + gp::kBaseJitter;
  const double k12 = std::exp(-0.5 * 0.49);
  const double det = (1.0 + diag) * (1.0 + diag) - k12 * k12;
  auto quad = [&](double y1, double y2) { return ((1.0 + diag) * (y1 * y1 + y2 * y2) - 2.0 * k12 * y1 * y2) / det; };
  const double l1 = gp::log_marginal_likelihood(k, 0.01, X, y);
  const double l2 = gp::log_marginal_likelihood(k, 0.01, X, 2.0 * y);
  EXPECT_NEAR(l1 - l2, -0.5 * quad(0.3, -0.4) + 0.5 * quad(0.6, -0.8), 1e-12);
  EXPECT_NEAR(l1, -0.5 * quad(0.3, -0.4) - 0.5 * std::log(det) - std::log(2.0 * std::numbers::pi), 1e-12);
}

TEST(LogMarginalLikelihood, LargeNoiseDrivesLmlDown) {
  const KernelSpec k{KernelFamily::kRbf, 1.0, {1.0}, 1.0};
  const Eigen::MatrixXd X = column({0.0, 0.5, 1.0});
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(3, 0.1);
  double prev = gp::log_marginal_likelihood(k, 1.0, X, y);
  for (double noise : {10.0, 1e2, 1e4, 1e8}) {
    const double cur = gp::log_marginal_likelihood(k, noise, X, y);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
  EXPECT_LT(prev, -20.0);
}

TEST(Fit, BeatsTrueHyperparametersOnGeneratedData) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  std::normal_distribution<double> z;
  const int n = 30;
  Eigen::MatrixXd X(n, 1);
  for (int i = 0; i < n; ++i) X(i, 0) = u(rng);
  const KernelSpec truth{KernelFamily::kRbf, 1.0, {0.8}, 1.0};
  const double true_noise = 0.01;
  Eigen::MatrixXd K = gp::gram(truth, X);
  K.diagonal().array() += true_noise;
  const Eigen::MatrixXd L = K.llt().matrixL();
  Eigen::VectorXd w(n);
  for (auto& v : w) v = z(rng);
  const Eigen::VectorXd y = L * w;

  gp::FitReport report;
  const auto m = gp::fit(X, y, KernelFamily::kRbf, 5, {}, &report);
  // Same coordinates as the fit: standardized inputs, centred targets.
  const auto& s = m.scaler();
  const KernelSpec truth_scaled{KernelFamily::kRbf, 1.0, {0.8 / s.scale[0]}, 1.0};
  const Eigen::VectorXd yc = y.array() - y.mean();
  const double at_truth = gp::log_marginal_likelihood(truth_scaled, true_noise, m.inputs(), yc);
  EXPECT_GE(m.log_marginal_likelihood(), at_truth - 1e-6);
  EXPECT_NEAR(report.best_lml, m.log_marginal_likelihood(), 1e-9);
  EXPECT_EQ(report.restarts_succeeded, 8);
}

TEST(Fit, ConstantTargetsPredictTheConstant) {
  const Eigen::MatrixXd X = column({0.0, 1.0, 2.0, 3.0});
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(4, 0.42);
  const auto m = gp::fit(X, y, KernelFamily::kMatern52, 1);
  for (double x : {-10.0, 0.5, 1.0, 7.0}) EXPECT_NEAR(m.predict({x}).mean, 0.42, 1e-6);
}

TEST(Fit, SameSeedSameHyperparameters) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  Eigen::MatrixXd X(25, 2);
  Eigen::VectorXd y(25);
  for (auto& v : X.reshaped()) v = z(rng);
  for (auto& v : y) v = z(rng);
  for (auto f : kFamilies) {
    const auto a = gp::fit(X, y, f, 9), b = gp::fit(X, y, f, 9);
    EXPECT_EQ(a.kernel().variance, b.kernel().variance);
    EXPECT_EQ(a.kernel().lengthscales, b.kernel().lengthscales);
    EXPECT_EQ(a.kernel().alpha, b.kernel().alpha);
    EXPECT_EQ(a.noise_variance(), b.noise_variance());
  }
}

TEST(Fit, RejectsDegenerateInput) {
  EXPECT_THROW(gp::fit(column({1.0}), Eigen::VectorXd::Zero(1), KernelFamily::kRbf, 1), DataError);
  EXPECT_THROW(gp::fit(column({1.0, 2.0}), Eigen::VectorXd::Zero(3), KernelFamily::kRbf, 1), DataError);
  Eigen::VectorXd bad(2);
  bad << 0.0, std::nan("");
  EXPECT_THROW(gp::fit(column({1.0, 2.0}), bad, KernelFamily::kRbf, 1), DataError);
}

TEST(Predict, InterpolatesAtTrainingPoint) {
  const KernelSpec k{KernelFamily::kRbf, 1.0, {0.7}, 1.0};
  const Eigen::MatrixXd X = column({0.0, 0.4, 1.3, 2.0});
  Eigen::VectorXd y(4);
  y << 0.5, -0.2, 0.9, 0.1;
  const auto m = gp::GPModel::condition(k, 0.0, X, y, oracle::identity_scaler(1));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(m.predict({X(i, 0)}).mean, y(i), 1e-6);
}

TEST(Predict, RevertsToPriorFarAway) {
  const KernelSpec k{KernelFamily::kRbf, 1.3, {0.5}, 1.0};
  Eigen::VectorXd y(3);
  y << 1.0, 2.0, 3.0;
  const auto m = gp::GPModel::condition(k, 0.05, column({0.0, 0.5, 1.0}), y, oracle::identity_scaler(1), false);
  const auto p = m.predict({1e3});
  EXPECT_NEAR(p.mean, 0.0, 1e-12);
  EXPECT_NEAR(p.variance, 1.3 + 0.05, 1e-12);
}

TEST(Predict, TwoPointClosedForm) {
  for (auto f : kFamilies) {
    const KernelSpec k{f, 1.4, {0.9}, 2.0};
    const double x1 = -0.3, x2 = 0.8, xs = 0.25, noise = 0.02;
    Eigen::VectorXd y(2);
    y << 0.7, -0.1;
    for (bool center : {false, true}) {
      const auto m = gp::GPModel::condition(k, noise, column({x1, x2}), y, oracle::identity_scaler(1), center);
      auto kv = [&](double a, double b) { return oracle::kernel(k, {a}, {b}); };
      const auto o = oracle::two_point(kv(x1, x1), kv(x1, x2), kv(x2, x2), noise + m.jitter(), y(0), y(1),
                                       center ? y.mean() : 0.0, kv(xs, x1), kv(xs, x2), kv(xs, xs), noise);
      const auto p = m.predict({xs});
      EXPECT_NEAR(p.mean, o.mean, 1e-10);
      EXPECT_NEAR(p.variance, o.variance, 1e-10);
    }
  }
}

TEST(Predict, DimensionMismatch) {
  const KernelSpec k{KernelFamily::kRbf, 1.0, {1.0}, 1.0};
  const auto m = gp::GPModel::condition(k, 0.1, column({0.0, 1.0}), Eigen::VectorXd::Ones(2), oracle::identity_scaler(1));
  EXPECT_THROW(m.predict({0.0, 1.0}), ValidationError);
}

TEST(InputScaler, StandardizesContinuousColumnsOnly) {
  Eigen::MatrixXd X(4, 2);
  X << 1, 0, 2, 1, 3, 0, 4, 1;
  const auto s = gp::InputScaler::from_data(X, {false, true});
  const auto Z = s.transform(X);
  EXPECT_NEAR(Z.col(0).mean(), 0.0, 1e-15);
  EXPECT_NEAR(Z.col(0).squaredNorm() / 4.0, 1.0, 1e-12);
  EXPECT_EQ(Z.col(1), X.col(1));
}

TEST(ModelJson, RoundTripPredictsIdentically) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z;
  Eigen::MatrixXd X(12, 2);
  Eigen::VectorXd y(12);
  for (auto& v : X.reshaped()) v = z(rng);
  for (auto& v : y) v = z(rng);
  const auto m = gp::fit(X, y, KernelFamily::kRatQuad, 2);
  const auto back = gp::model_from_json(nlohmann::json::parse(gp::to_json(m).dump()));
  for (int i = 0; i < 10; ++i) {
    const double a = z(rng), b = z(rng);
    EXPECT_EQ(m.predict({a, b}).mean, back.predict({a, b}).mean);
    EXPECT_EQ(m.predict({a, b}).variance, back.predict({a, b}).variance);
  }
}
