#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "cnf/objectives.hpp"
#include "cnf/transfer.hpp"
#include "test_support.hpp"

using namespace cnf;
using oracle::fd_jacobian;
using oracle::random_vector;
using oracle::randomize;

namespace {

// x = z + shift with a trainable shift; log|det| = 0.
struct ShiftGenerator {
  struct Tape {};
  ParamStore store;
  std::size_t d;

  explicit ShiftGenerator(std::size_t dim) : d(dim) { store.add("shift", {dim}); }
  std::size_t dim() const { return d; }
  ParamStore& params() { return store; }
  Vector shift() const { return Eigen::Map<const Vector>(store.values().data(), static_cast<Eigen::Index>(d)); }
  FlowResult generate(const Matrix& z, Tape*) const {
    return {Matrix(z.colwise() + shift()), Vector::Zero(z.cols())};
  }
  void backward(const Tape&, const Matrix& g_x, const Vector&) {
    const Vector g = g_x.rowwise().sum();
    for (std::size_t i = 0; i < d; ++i) store.grads()[i] += g(static_cast<Eigen::Index>(i));
  }
};
static_assert(Generator<ShiftGenerator>);

LogPosteriorTarget normal_target(const Vector& centre) {
  return LogPosteriorTarget(static_cast<std::size_t>(centre.size()), [centre](const Matrix& x, Vector& v, Matrix& g) {
    Matrix r = x.colwise() - centre;
    v = (-0.5 * r.colwise().squaredNorm().array() - 0.5 * static_cast<double>(x.rows()) * kLog2Pi).matrix().transpose();
    g = -r;
  });
}

ConditionalFlow random_cond_flow(std::size_t nx, std::size_t ny, std::uint64_t seed) {
  auto t = init_cond_flow(nx, ny, 4, {8}, 2.0, seed);
  Rng rng(seed + 5);
  randomize(t.flow_x.params(), rng, 0.4);
  randomize(t.flow_y.params(), rng, 0.4);
  return t;
}

LinearGaussianProblem small_problem(std::size_t nx, std::size_t ny, std::uint64_t seed) {
  Rng rng(seed);
  LinearGaussianProblem p;
  p.A = standard_normal(static_cast<Eigen::Index>(ny), static_cast<Eigen::Index>(nx), rng) * 0.7;
  p.noise_mean = Vector::Zero(static_cast<Eigen::Index>(ny));
  p.noise_var = Vector::Constant(static_cast<Eigen::Index>(ny), 0.3);
  p.prior_mean = random_vector(static_cast<Eigen::Index>(nx), rng);
  p.prior_cov = Vector::LinSpaced(static_cast<Eigen::Index>(nx), 0.5, 1.5).asDiagonal();
  return p;
}

// Dense re-evaluation of log N(y; A x + mu, Sigma) without the diagonal shortcut.
double dense_log_likelihood(const LinearGaussianProblem& p, const Vector& x, const Vector& y) {
  const Matrix cov = p.noise_var.asDiagonal();
  const Vector r = y - p.A * x - p.noise_mean;
  const double quad = r.dot(cov.inverse() * r);
  return -0.5 * quad - 0.5 * std::log(cov.determinant()) - 0.5 * static_cast<double>(p.ny()) * kLog2Pi;
}

double sample_std(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(ForwardKl, IdentityFlowChiSquareMean) {
  auto t = init_cond_flow(3, 2, 2, {8}, 2.0, 1);
  Rng rng(2);
  const Eigen::Index n = 100000;
  Matrix x = standard_normal(3, n, rng), y = standard_normal(2, n, rng);
  const double loss = forward_kl_loss(t, x, y);
  // 0.5 chi^2_5 has mean 2.5 and variance 2.5.
  EXPECT_LT(std::abs(loss - 2.5), 3.0 * std::sqrt(2.5 / static_cast<double>(n)));
}

TEST(ForwardKl, ZeroSampleThroughIdentity) {
  auto t = init_cond_flow(3, 2, 2, {8}, 2.0, 1);
  EXPECT_EQ(forward_kl_loss(t, Matrix::Zero(3, 1), Matrix::Zero(2, 1)), 0.0);
}

TEST(ForwardKl, GradientsMatchFiniteDifferences) {
  auto t = random_cond_flow(2, 1, 3);
  Rng rng(4);
  const Matrix x = standard_normal(2, 6, rng), y = standard_normal(1, 6, rng);
  LossFn loss = [&](ParamStore&) { return forward_kl_loss(t, x, y); };
  EXPECT_LT(grad_check(loss, t.flow_x.params(), 1e-5), 1e-5);
  EXPECT_LT(grad_check(loss, t.flow_y.params(), 1e-5), 1e-5);
}

TEST(ForwardKl, DeterministicLossAndGrads) {
  auto a = random_cond_flow(3, 2, 5), b = random_cond_flow(3, 2, 5);
  Rng rng(6);
  const Matrix x = standard_normal(3, 16, rng), y = standard_normal(2, 16, rng);
  EXPECT_EQ(forward_kl_loss(a, x, y), forward_kl_loss(b, x, y));
  EXPECT_TRUE(a.flow_x.params() == b.flow_x.params());
  EXPECT_TRUE(std::equal(a.flow_x.params().grads().begin(), a.flow_x.params().grads().end(),
                         b.flow_x.params().grads().begin()));
}

TEST(ForwardKl, NonFiniteTermNamesSample) {
  auto t = init_cond_flow(2, 1, 2, {4}, 2.0, 1);
  Matrix x = Matrix::Zero(2, 3);
  x(0, 2) = std::numeric_limits<double>::infinity();
  try {
    forward_kl_loss(t, x, Matrix::Zero(1, 3));
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("sample 2"), std::string::npos) << e.what();
  }
}

// ---------------------------------------------------------------------------

TEST(Likelihood, ClosedFormsAndDenseReevaluation) {
  LinearGaussianProblem one{Matrix::Ones(1, 1), Vector::Zero(1), Vector::Ones(1), Vector::Zero(1), Matrix::Ones(1, 1)};
  auto v = gaussian_log_likelihood(one, Vector::Zero(1), Vector::Zero(1));
  EXPECT_NEAR(v.value, -0.918939, 1e-6);

  auto p = make_supervised_gaussian(2);
  Rng rng(7);
  const Vector y = random_vector(6, rng, 2.0);
  // Any x with A x = y - mu_eps: minimum-norm solution.
  const Vector x0 = p.A.completeOrthogonalDecomposition().solve(y - p.noise_mean);
  EXPECT_LT(gaussian_log_likelihood(p, x0, y).grad.cwiseAbs().maxCoeff(), 1e-10);

  for (int rep = 0; rep < 5; ++rep) {
    const Vector x = random_vector(12, rng, 3.0);
    EXPECT_NEAR(gaussian_log_likelihood(p, x, y).value, dense_log_likelihood(p, x, y), 1e-10);
    auto fd = fd_jacobian([&](const Vector& u) { return Vector::Constant(1, dense_log_likelihood(p, u, y)); }, x, 1e-5);
    EXPECT_LT((fd.row(0).transpose() - gaussian_log_likelihood(p, x, y).grad).cwiseAbs().maxCoeff(), 1e-6);
  }
  EXPECT_THROW(gaussian_log_likelihood(p, Vector::Zero(11), y), DimensionError);
  p.noise_var(0) = 0.0;
  EXPECT_THROW(gaussian_log_likelihood(p, Vector::Zero(12), y), ConfigError);
}

TEST(Target, AnalyticPriorWithZeroOperator) {
  auto p = make_supervised_gaussian(3);
  p.A.setZero();
  auto target = make_log_posterior(p, AnalyticGaussianPrior{p.prior_mean, p.prior_cov}, Vector::Ones(6));
  EXPECT_LT(target(p.prior_mean).grad.cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Target, IdentityFlowPriorIsStandardNormal) {
  auto p = small_problem(3, 2, 4);
  auto t = std::make_shared<const ConditionalFlow>(init_cond_flow(3, 2, 4, {8}, 2.0, 9));
  const Vector y = Vector::Ones(2);
  auto flow = make_log_posterior(p, FlowPosteriorPrior{t, Vector::Constant(2, 0.3)}, y);
  auto gauss = make_log_posterior(p, AnalyticGaussianPrior{Vector::Zero(3), Matrix::Identity(3, 3)}, y);
  Rng rng(5);
  const Vector a = random_vector(3, rng, 2.0), b = random_vector(3, rng, 2.0);
  EXPECT_LT(std::abs((flow.value(a) - flow.value(b)) - (gauss.value(a) - gauss.value(b))), 1e-10);
  EXPECT_LT((flow(a).grad - gauss(a).grad).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Target, GradientsMatchFiniteDifferences) {
  auto p = small_problem(4, 3, 6);
  auto t = std::make_shared<const ConditionalFlow>(random_cond_flow(4, 2, 7));
  const Vector y = Vector::LinSpaced(3, -1.0, 1.0);
  Matrix cov = Matrix::Identity(4, 4) * 0.8;
  cov(0, 1) = cov(1, 0) = 0.3;
  std::vector<LogPosteriorTarget> targets{make_log_posterior(p, FlowPosteriorPrior{t, Vector::Constant(2, 0.5)}, y),
                                          make_log_posterior(p, AnalyticGaussianPrior{Vector::Ones(4), cov}, y)};
  Rng rng(8);
  for (const auto& target : targets)
    for (int rep = 0; rep < 20; ++rep) {
      const Vector x = random_vector(4, rng, 2.0);
      auto fd = fd_jacobian([&](const Vector& u) { return Vector::Constant(1, target.value(u)); }, x, 1e-5);
      const Vector g = target(x).grad;
      EXPECT_LT((fd.row(0).transpose() - g).norm() / std::max(g.norm(), 1e-12), 1e-5);
    }
}

TEST(Target, DimensionErrors) {
  auto p = small_problem(3, 2, 4);
  EXPECT_THROW(make_log_posterior(p, AnalyticGaussianPrior{Vector::Zero(2), Matrix::Identity(2, 2)}, Vector::Ones(2)),
               DimensionError);
  EXPECT_THROW(make_log_posterior(p, AnalyticGaussianPrior{Vector::Zero(3), Matrix::Identity(3, 3)}, Vector::Ones(3)),
               DimensionError);
  auto t = std::make_shared<const ConditionalFlow>(init_cond_flow(4, 2, 2, {4}, 2.0, 1));
  EXPECT_THROW(make_log_posterior(p, FlowPosteriorPrior{t, Vector::Ones(2)}, Vector::Ones(2)), DimensionError);
}

// ---------------------------------------------------------------------------

TEST(ReverseKl, IdentityGeneratorOnStandardNormal) {
  ShiftGenerator s(4);
  Rng rng(9);
  const Matrix z = standard_normal(4, 50, rng);
  const double expect = (0.5 * z.colwise().squaredNorm().array() + 2.0 * kLog2Pi).mean();
  EXPECT_NEAR(reverse_kl_loss(s, normal_target(Vector::Zero(4)), z), expect, 1e-12);
}

TEST(ReverseKl, ShiftFirstOrderCondition) {
  ShiftGenerator s(3);
  Rng rng(10);
  const Vector centre = random_vector(3, rng, 2.0);
  const Matrix z = standard_normal(3, 40, rng);
  const Vector opt = centre - z.rowwise().mean();
  for (std::size_t i = 0; i < 3; ++i) s.store.values()[i] = opt(static_cast<Eigen::Index>(i));
  s.store.zero_grads();
  reverse_kl_loss(s, normal_target(centre), z);
  for (double g : s.store.grads()) EXPECT_LT(std::abs(g), 1e-10);
}

TEST(ReverseKl, GradientsMatchFiniteDifferences) {
  auto p = small_problem(3, 2, 11);
  const Vector y(Vector::LinSpaced(2, 0.5, -0.5));
  auto target = make_log_posterior(p, AnalyticGaussianPrior{p.prior_mean, p.prior_cov}, y);
  Flow f = init_flow(3, 2, 4, {8}, 2.0, 12);
  Rng rng(13);
  randomize(f.params(), rng, 0.4);
  PinnedFlow s(f, Vector::Constant(2, 0.2));
  const Matrix z = standard_normal(3, 5, rng);
  LossFn loss = [&](ParamStore&) { return reverse_kl_loss(s, target, z); };
  EXPECT_LT(grad_check(loss, s.params(), 1e-5), 1e-5);
}

TEST(ReverseKl, EvidenceLowerBound) {
  // E[-log p~(S(z)) - logdet] = KL + H(N(0, I)) - log Z >= H - log Z.
  auto p = small_problem(3, 2, 14);
  const Vector y = Vector::Constant(2, 0.7);
  auto target = make_log_posterior(p, AnalyticGaussianPrior{p.prior_mean, p.prior_cov}, y);
  const double bound = -log_evidence(p, y) + standard_normal_entropy(3);
  Rng rng(15);
  for (int rep = 0; rep < 5; ++rep) {
    Flow f = init_flow(3, 0, 4, {8}, 2.0, 100 + rep);
    randomize(f.params(), rng, 0.3);
    PreconditionedFlow s(std::make_shared<const Flow>(init_flow(3, 2, 2, {4}, 2.0, 1)), Vector::Zero(2), f);
    const Matrix z = standard_normal(3, 20000, rng);
    PreconditionedFlow::Tape tape;
    auto gen = s.generate(z, &tape);
    Vector v;
    Matrix g;
    target.evaluate(gen.value, v, g);
    const Vector terms = -v - gen.logdet;
    const double mean = terms.mean();
    const double se = std::sqrt((terms.array() - mean).square().sum() / (terms.size() - 1.0) / terms.size());
    EXPECT_GE(mean, bound - 3.0 * se);
  }
}

TEST(ReverseKl, StandardErrorScalesWithBatch) {
  auto p = small_problem(3, 2, 16);
  auto target = make_log_posterior(p, AnalyticGaussianPrior{p.prior_mean, p.prior_cov}, Vector::Ones(2));
  Flow f = init_flow(3, 2, 2, {8}, 2.0, 17);
  Rng rng(18);
  randomize(f.params(), rng, 0.3);
  PinnedFlow s(f, Vector::Zero(2));
  std::vector<double> one, four;
  for (int rep = 0; rep < 300; ++rep) {
    one.push_back(reverse_kl_loss(s, target, standard_normal(3, 64, rng)));
    four.push_back(reverse_kl_loss(s, target, standard_normal(3, 256, rng)));
  }
  const double ratio = sample_std(four) / sample_std(one);
  EXPECT_GE(ratio, 0.2);
  EXPECT_LE(ratio, 0.8);
}

// ---------------------------------------------------------------------------

TEST(Adam, ZeroGradientsLeaveParamsUnchanged) {
  ParamStore p;
  p.add("w", {5});
  Rng rng(19);
  randomize(p, rng);
  ParamStore before = p;
  AdamState st(p, {});
  p.zero_grads();
  adam_step(st, p);
  EXPECT_TRUE(p == before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepClosedForm) {
  // m_hat = g and v_hat = g^2 after one step, so the update is -lr g / (|g| + eps).
  ParamStore p;
  p.add("w", {4});
  const std::vector<double> g{3.0, -1e-3, 1e-9, -2e-8};
  for (std::size_t i = 0; i < 4; ++i) p.grads()[i] = g[i];
  AdamConfig cfg;
  cfg.lr = 0.01;
  AdamState st(p, cfg);
  adam_step(st, p);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_NEAR(p.values()[i], -cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps), 1e-15) << i;
  EXPECT_NEAR(p.values()[0], -cfg.lr, 1e-10);
}

TEST(Adam, ConvergesOnQuadratic) {
  ParamStore p;
  p.add("w", {10});
  Rng rng(20);
  randomize(p, rng, 3.0);
  const Vector target = random_vector(10, rng, 3.0);
  AdamConfig cfg;
  cfg.lr = 0.05;
  AdamState st(p, cfg);
  auto theta = [&] { return Eigen::Map<Vector>(p.values().data(), 10); };
  for (int it = 0; it < 200; ++it) {
    const Vector g = theta() - target;
    std::copy(g.data(), g.data() + 10, p.grads().begin());
    adam_step(st, p);
  }
  EXPECT_LT((theta() - target).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Adam, ShapeMismatch) {
  ParamStore a, b;
  a.add("w", {3});
  b.add("w", {4});
  AdamState st(a, {});
  EXPECT_THROW(adam_step(st, b), DimensionError);
}

// ---------------------------------------------------------------------------

TEST(Train, ZeroIterations) {
  auto t = random_cond_flow(2, 1, 21);
  auto before = t.flow_x.params();
  JointBatch data{Matrix::Ones(2, 10), Matrix::Ones(1, 10)};
  TrainConfig cfg;
  cfg.iterations = 0;
  auto trace = train(t, data, cfg);
  EXPECT_TRUE(trace.values.empty());
  EXPECT_EQ(trace.iterations, 0u);
  EXPECT_TRUE(t.flow_x.params() == before);
}

TEST(Train, ForwardKlDeterminism) {
  auto p = small_problem(3, 2, 22);
  auto data = sample_joint(p, prior_law(p), 200, 23);
  TrainConfig cfg;
  cfg.iterations = 30;
  cfg.batch_size = 16;
  cfg.seed = 24;
  auto a = init_cond_flow(3, 2, 2, {8}, 2.0, 25), b = a;
  auto ta = train(a, data, cfg), tb = train(b, data, cfg);
  EXPECT_EQ(ta.values, tb.values);
  EXPECT_TRUE(a.flow_x.params() == b.flow_x.params());
  EXPECT_TRUE(a.flow_y.params() == b.flow_y.params());
  EXPECT_EQ(ta.values.size(), 30u);
  EXPECT_EQ(ta.seed, 24u);
  EXPECT_EQ(ta.batch_size, 16u);
  cfg.seed = 26;
  auto c = init_cond_flow(3, 2, 2, {8}, 2.0, 25);
  EXPECT_NE(train(c, data, cfg).values, ta.values);
}

TEST(Train, ReverseKlDeterminism) {
  auto p = small_problem(3, 2, 27);
  auto target = make_log_posterior(p, AnalyticGaussianPrior{p.prior_mean, p.prior_cov}, Vector::Ones(2));
  TrainConfig cfg;
  cfg.objective = Objective::reverse_kl;
  cfg.iterations = 30;
  cfg.batch_size = 8;
  cfg.seed = 28;
  cfg.mode = "scratch";
  PinnedFlow a(init_flow(3, 2, 2, {8}, 2.0, 29), Vector::Zero(2)), b = a;
  auto ta = train(a, target, cfg), tb = train(b, target, cfg);
  EXPECT_EQ(ta.values, tb.values);
  EXPECT_TRUE(a.params() == b.params());
  EXPECT_EQ(ta.mode, "scratch");
}

TEST(Train, NumericErrorKeepsPartialTrace) {
  auto calls = std::make_shared<int>(0);
  LogPosteriorTarget target(2, [calls](const Matrix& x, Vector& v, Matrix& g) {
    v = -0.5 * x.colwise().squaredNorm().transpose();
    g = -x;
    if (++*calls > 5) v(0) = std::nan("");
  });
  ShiftGenerator s(2);
  TrainConfig cfg;
  cfg.objective = Objective::reverse_kl;
  cfg.iterations = 20;
  cfg.batch_size = 4;
  auto trace = train(s, target, cfg);
  EXPECT_TRUE(trace.aborted);
  EXPECT_EQ(trace.values.size(), 5u);
  EXPECT_EQ(trace.iterations, 5u);
  EXPECT_FALSE(trace.abort_reason.empty());
}

TEST(Train, ConfigErrors) {
  auto t = random_cond_flow(2, 1, 30);
  JointBatch data{Matrix::Ones(2, 10), Matrix::Ones(1, 10)};
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(train(t, data, cfg), ConfigError);
  cfg.batch_size = 4;
  cfg.objective = Objective::reverse_kl;
  EXPECT_THROW(train(t, data, cfg), ConfigError);
  cfg.objective = Objective::forward_kl;
  EXPECT_THROW(train(t, JointBatch{Matrix(2, 0), Matrix(1, 0)}, cfg), ConfigError);
}

TEST(Train, CosineScheduleEndpoints) {
  TrainConfig cfg;
  cfg.iterations = 101;
  cfg.schedule = LrSchedule::cosine;
  cfg.lr_final_fraction = 0.01;
  EXPECT_DOUBLE_EQ(cfg.lr_at(0), cfg.adam.lr);
  EXPECT_NEAR(cfg.lr_at(100), 0.01 * cfg.adam.lr, 1e-18);
  EXPECT_NEAR(cfg.lr_at(50), 0.505 * cfg.adam.lr, 1e-15);
  cfg.schedule = LrSchedule::constant;
  EXPECT_EQ(cfg.lr_at(77), cfg.adam.lr);
}

TEST(Train, ReverseKlReachesEvidenceBoundInTwoDimensions) {
  auto p = small_problem(2, 2, 31);
  const Vector y = Vector::Constant(2, 0.4);
  auto target = make_log_posterior(p, AnalyticGaussianPrior{p.prior_mean, p.prior_cov}, y);
  PinnedFlow s(init_flow(2, 2, 4, {16}, 2.0, 32), Vector::Zero(2));
  TrainConfig cfg;
  cfg.objective = Objective::reverse_kl;
  cfg.iterations = 3000;
  cfg.batch_size = 32;
  cfg.seed = 33;
  cfg.adam.lr = 3e-3;
  cfg.schedule = LrSchedule::cosine;
  cfg.lr_final_fraction = 0.01;
  auto trace = train(s, target, cfg);
  ASSERT_FALSE(trace.aborted);
  double tail = 0;
  for (std::size_t i = trace.values.size() - 100; i < trace.values.size(); ++i) tail += trace.values[i];
  tail /= 100.0;
  EXPECT_LT(std::abs(tail - (-log_evidence(p, y) + standard_normal_entropy(2))), 0.1);
}
