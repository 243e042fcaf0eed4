#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "cnf/problems.hpp"
#include "test_support.hpp"

using namespace cnf;
using oracle::random_vector;

namespace {

// Conditional of the joint Gaussian (x, y) via the Schur complement; shares no
// code with the precision-form posterior in the library.
GaussianPosterior schur_posterior(const LinearGaussianProblem& p, const Vector& y) {
  const Matrix sxy = p.prior_cov * p.A.transpose();
  Matrix syy = p.A * sxy;
  syy.diagonal() += p.noise_var;
  const Matrix gain = sxy * syy.inverse();
  return {p.prior_mean + gain * (y - p.A * p.prior_mean - p.noise_mean), p.prior_cov - gain * sxy.transpose()};
}

LinearGaussianProblem random_small_problem(std::size_t nx, std::size_t ny, Rng& rng) {
  std::uniform_real_distribution<double> u(0.3, 1.5);
  LinearGaussianProblem p;
  p.A = standard_normal(static_cast<Eigen::Index>(ny), static_cast<Eigen::Index>(nx), rng);
  p.noise_mean = random_vector(static_cast<Eigen::Index>(ny), rng, 0.5);
  p.noise_var = Vector::NullaryExpr(static_cast<Eigen::Index>(ny), [&] { return u(rng); });
  p.prior_mean = random_vector(static_cast<Eigen::Index>(nx), rng, 1.0);
  p.prior_cov = Vector::NullaryExpr(static_cast<Eigen::Index>(nx), [&] { return u(rng); }).asDiagonal();
  return p;
}

// Posterior box: +-9 posterior standard deviations around the mean.
GridBox box_for(const GaussianPosterior& post) {
  const Vector sd = post.cov.diagonal().cwiseSqrt();
  return {post.mean - 9.0 * sd, post.mean + 9.0 * sd};
}

double unnormalized_log_post(const LinearGaussianProblem& p, const Vector& y, const Vector& x) {
  Matrix prior = p.prior_cov;
  Matrix noise = p.noise_var.asDiagonal();
  return gaussian_log_density(y, p.A * x + p.noise_mean, noise) + gaussian_log_density(x, p.prior_mean, prior);
}

}  // namespace

TEST(SupervisedGaussian, StatedLaws) {
  auto p = make_supervised_gaussian(1);
  EXPECT_EQ(p.nx(), 12u);
  EXPECT_EQ(p.ny(), 6u);
  EXPECT_EQ(p.prior_cov(6, 6), 7.0);
  for (Eigen::Index i = 0; i < 12; ++i) EXPECT_EQ(p.prior_mean(i), 1.0);
  for (Eigen::Index i = 0; i < 6; ++i) {
    EXPECT_EQ(p.noise_var(i), 0.1);
    EXPECT_EQ(p.noise_mean(i), 0.0);
  }
  EXPECT_EQ((p.prior_cov - Matrix(p.prior_cov.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 0.0);
  auto q = make_supervised_gaussian(1);
  EXPECT_TRUE(p.A == q.A);
  EXPECT_FALSE(p.A == make_supervised_gaussian(2).A);
  EXPECT_EQ(make_supervised_gaussian(1, 3, 2).A.rows(), 2);
}

TEST(SupervisedGaussian, OperatorEntryLaw) {
  // 10^4 redraws, pooled over the 72 entries.
  double s = 0, s2 = 0, s4 = 0;
  std::size_t n = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    auto p = make_supervised_gaussian(seed);
    for (Eigen::Index i = 0; i < p.A.size(); ++i) {
      const double a = p.A.data()[i];
      s += a;
      s2 += a * a;
      s4 += a * a * a * a;
      ++n;
    }
  }
  const double var = s2 / n - (s / n) * (s / n);
  const double se = std::sqrt((s4 / n - (s2 / n) * (s2 / n)) / n);
  EXPECT_LT(std::abs(var - 1.0 / 12.0), 3.0 * se);
}

TEST(ShiftedProblem, DataLawAndInferenceProblem) {
  auto base = make_supervised_gaussian(3);
  auto s = make_shifted_problem(base);
  for (Eigen::Index i = 0; i < 12; ++i) EXPECT_EQ(s.data_law.mean(i), 3.0);
  EXPECT_DOUBLE_EQ(s.data_law.var(0), 1.96);
  EXPECT_NEAR(s.data_law.var(11), 1.96 * std::exp(0.3 * std::log(12.0)), 1e-12);
  EXPECT_NEAR(s.data_law.var(11), 4.1306, 1e-4);
  EXPECT_TRUE(s.problem.A == base.A);
  EXPECT_TRUE(s.problem.noise_var == base.noise_var);
  EXPECT_TRUE(s.problem.prior_mean == base.prior_mean);
  EXPECT_TRUE(s.problem.prior_cov == base.prior_cov);

  base.prior_cov(0, 1) = base.prior_cov(1, 0) = 0.1;
  EXPECT_THROW(make_shifted_problem(base), ConfigError);
}

TEST(SampleJoint, NoiselessLimitAndDeterminism) {
  auto p = make_supervised_gaussian(4);
  p.noise_var.setConstant(1e-30);
  auto b = sample_joint(p, prior_law(p), 50, 8);
  EXPECT_LT((b.y - p.A * b.x).cwiseAbs().maxCoeff(), 1e-12);
  auto c = sample_joint(p, prior_law(p), 50, 8);
  EXPECT_TRUE(b.x == c.x);
  EXPECT_TRUE(b.y == c.y);
  EXPECT_THROW(sample_joint(p, prior_law(p), 0, 8), ConfigError);
}

TEST(SampleJoint, MeanOfObservations) {
  auto p = make_supervised_gaussian(5);
  p.noise_mean = Vector::LinSpaced(6, -1.0, 1.0);
  const std::size_t n = 100000;
  auto b = sample_joint(p, prior_law(p), n, 9);
  const Vector expect = p.A * p.prior_mean + p.noise_mean;
  Matrix cov = p.A * p.prior_cov * p.A.transpose();
  cov.diagonal() += p.noise_var;
  const Vector mean = b.y.rowwise().mean();
  for (Eigen::Index i = 0; i < 6; ++i)
    EXPECT_LT(std::abs(mean(i) - expect(i)), 3.0 * std::sqrt(cov(i, i) / static_cast<double>(n))) << i;
}

TEST(AnalyticPosterior, TrivialCases) {
  auto p = make_supervised_gaussian(6);
  p.A.setZero();
  auto post = analytic_posterior(p, Vector::Ones(6));
  EXPECT_LT((post.mean - p.prior_mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((post.cov - p.prior_cov).cwiseAbs().maxCoeff(), 1e-12);

  LinearGaussianProblem one{Matrix::Ones(1, 1), Vector::Zero(1), Vector::Ones(1), Vector::Zero(1), Matrix::Ones(1, 1)};
  auto q = analytic_posterior(one, Vector::Constant(1, 2.0));
  EXPECT_NEAR(q.mean(0), 1.0, 1e-14);
  EXPECT_NEAR(q.cov(0, 0), 0.5, 1e-14);
}

TEST(AnalyticPosterior, IllConditionedIsNumericError) {
  LinearGaussianProblem p{Matrix::Identity(2, 2) * 1e7, Vector::Zero(2), Vector::Ones(2), Vector::Zero(2),
                          Matrix::Identity(2, 2)};
  p.A(1, 1) = 0.0;
  EXPECT_THROW(analytic_posterior(p, Vector::Zero(2)), NumericError);
}

TEST(AnalyticPosterior, AgreesWithSchurComplement) {
  Rng rng(11);
  auto p = make_supervised_gaussian(7);
  for (int rep = 0; rep < 10; ++rep) {
    const Vector y = random_vector(6, rng, 3.0);
    auto a = analytic_posterior(p, y);
    auto b = schur_posterior(p, y);
    EXPECT_LT((a.mean - b.mean).norm() / b.mean.norm(), 1e-10);
    EXPECT_LT((a.cov - b.cov).norm() / b.cov.norm(), 1e-10);
  }
}

TEST(AnalyticPosterior, AgreesWithGridOracle) {
  Rng rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t nx = 1 + rep % 2, ny = 1 + (rep / 2) % 2;
    auto p = random_small_problem(nx, ny, rng);
    const Vector y = random_vector(static_cast<Eigen::Index>(ny), rng, 2.0);
    auto post = analytic_posterior(p, y);
    auto grid = grid_oracle([&](const Vector& x) { return unnormalized_log_post(p, y, x); }, box_for(post),
                            nx == 1 ? 401 : 301);
    EXPECT_LT((grid.mean - post.mean).cwiseAbs().maxCoeff(), 1e-4) << rep;
    EXPECT_LT((grid.cov - post.cov).cwiseAbs().maxCoeff(), 1e-4) << rep;
    EXPECT_LT(std::abs(grid.normalization / std::exp(log_evidence(p, y)) - 1.0), 1e-4) << rep;
  }
}

TEST(AnalyticPosterior, Contraction) {
  Rng rng(13);
  for (int rep = 0; rep < 30; ++rep) {
    auto p = rep % 2 ? make_supervised_gaussian(100 + rep) : random_small_problem(1 + rep % 5, 1 + rep % 3, rng);
    auto post = analytic_posterior(p, random_vector(p.A.rows(), rng, 2.0));
    Eigen::SelfAdjointEigenSolver<Matrix> eig(p.prior_cov - post.cov);
    EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
  }
}

TEST(LogEvidence, ClosedForms) {
  LinearGaussianProblem one{Matrix::Ones(1, 1), Vector::Zero(1), Vector::Ones(1), Vector::Zero(1), Matrix::Ones(1, 1)};
  const double expect = -0.5 * std::log(4.0 * std::numbers::pi) - 1.0;
  EXPECT_NEAR(log_evidence(one, Vector::Constant(1, 2.0)), expect, 1e-12);
  EXPECT_NEAR(expect, -2.265512, 1e-6);

  auto p = make_supervised_gaussian(8);
  p.A.setZero();
  p.noise_mean.setConstant(0.5);
  const Vector y = Vector::LinSpaced(6, -1.0, 2.0);
  double direct = 0;
  for (Eigen::Index i = 0; i < 6; ++i)
    direct += -0.5 * std::log(2 * std::numbers::pi * 0.1) - 0.5 * (y(i) - 0.5) * (y(i) - 0.5) / 0.1;
  EXPECT_NEAR(log_evidence(p, y), direct, 1e-10);
}

TEST(GridOracle, KnownDensities) {
  auto sn = grid_oracle([](const Vector& x) { return -0.5 * x(0) * x(0) - 0.5 * kLog2Pi; },
                        {Vector::Constant(1, -8.0), Vector::Constant(1, 8.0)}, 401);
  EXPECT_NEAR(sn.normalization, 1.0, 1e-6);
  EXPECT_LT(std::abs(sn.mean(0)), 1e-8);
  EXPECT_NEAR(sn.cov(0, 0), 1.0, 1e-4);

  auto shifted = grid_oracle([](const Vector& x) { return -0.5 * (x(0) - 2.0) * (x(0) - 2.0) / 0.25; },
                             {Vector::Constant(1, -2.0), Vector::Constant(1, 6.0)}, 401);
  EXPECT_NEAR(shifted.mean(0), 2.0, 1e-6);
}

TEST(GridOracle, Errors) {
  auto f = [](const Vector&) { return 0.0; };
  EXPECT_THROW(grid_oracle(f, {Vector::Zero(3), Vector::Ones(3)}, 11), UnsupportedError);
  EXPECT_THROW(grid_oracle(f, {Vector::Zero(1), Vector::Ones(1)}, 402), ConfigError);
  EXPECT_THROW(grid_oracle(f, {Vector::Ones(1), Vector::Zero(1)}, 11), ConfigError);
  EXPECT_THROW(grid_oracle([](const Vector&) { return std::nan(""); }, {Vector::Zero(1), Vector::Ones(1)}, 11),
               NumericError);
}

TEST(Sensing, ProjectorAlgebra) {
  auto full = make_sensing_operator(50, 1.0, 1);
  EXPECT_TRUE(full.dense() == Matrix(Matrix::Identity(50, 50)));

  auto op = make_sensing_operator(4096, 0.3, 2);
  EXPECT_EQ(op.indices.size(), 1229u);
  EXPECT_TRUE(std::is_sorted(op.indices.begin(), op.indices.end()));
  EXPECT_EQ(std::adjacent_find(op.indices.begin(), op.indices.end()), op.indices.end());

  auto small = make_sensing_operator(40, 0.3, 3);
  const Matrix a = small.dense();
  EXPECT_TRUE(a * a == a);
  EXPECT_TRUE(a == a.transpose());
  // B selects rows of the identity; A = B^T B.
  Matrix b = Matrix::Zero(static_cast<Eigen::Index>(small.indices.size()), 40);
  for (std::size_t r = 0; r < small.indices.size(); ++r) b(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(small.indices[r])) = 1;
  EXPECT_TRUE(b.transpose() * b == a);

  EXPECT_TRUE(make_sensing_operator(40, 0.3, 3).indices == small.indices);
  EXPECT_THROW(make_sensing_operator(40, 0.0, 1), ConfigError);
  EXPECT_THROW(make_sensing_operator(40, 1.5, 1), ConfigError);
}

TEST(LayeredImage, NormalizationAndDeterminism) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Vector img = synth_layered_image(16, seed);
    EXPECT_EQ(img.size(), 256);
    EXPECT_NEAR(img.cwiseAbs().maxCoeff(), 1.0, 1e-12);
    EXPECT_LT(std::abs(img.mean()), 1e-12);
  }
  EXPECT_TRUE(synth_layered_image(32, 5) == synth_layered_image(32, 5));
  EXPECT_FALSE(synth_layered_image(32, 5) == synth_layered_image(32, 6));
  EXPECT_THROW(synth_layered_image(7, 1), ConfigError);
}

TEST(LayeredImage, ColumnSpectrumIsBandLimited) {
  // Naive DFT down each column; energy below half Nyquist over 100 images.
  const std::size_t n = 64;
  double low = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Vector img = synth_layered_image(n, seed);
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t k = 0; k <= n / 2; ++k) {
        std::complex<double> acc = 0;
        for (std::size_t r = 0; r < n; ++r)
          acc += img(static_cast<Eigen::Index>(r * n + c)) *
                 std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * r) / static_cast<double>(n));
        const double e = std::norm(acc) * ((k == 0 || k == n / 2) ? 1.0 : 2.0);
        total += e;
        if (k < n / 4) low += e;
      }
    }
  }
  EXPECT_GE(low / total, 0.8);
}

TEST(ImageProblems, NoiseLawsAndSplit) {
  auto probs = make_image_problems(16, 4);
  EXPECT_EQ(probs.supervised.noise_var, 1.2);
  EXPECT_EQ(probs.unsupervised.noise_var, 0.2);
  EXPECT_FALSE(probs.supervised.sensing.has_value());
  EXPECT_EQ(probs.unsupervised.likelihood().A.trace(), std::round(0.3 * 256));
  EXPECT_EQ(probs.supervised.likelihood().noise_var(3), 1.2);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 50; ++j) EXPECT_NE(probs.train_seed(i), probs.test_seed(j));

  auto corpus = sample_image_corpus(probs, 10, 3);
  EXPECT_TRUE(corpus.x.col(2) == probs.train_image(2));
  auto again = sample_image_corpus(probs, 10, 3);
  EXPECT_TRUE(corpus.y == again.y);
  const double resid_var = (corpus.y - corpus.x).array().square().mean();
  EXPECT_NEAR(resid_var, 1.2, 0.15);
}
