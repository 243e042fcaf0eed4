#pragma once

// Training objectives, posterior targets, Adam and the training loops.
//
//   forward KL (joint pairs):  E[ 0.5 |T(x, y)|^2 - log|det J_T(x, y)| ]
//   reverse KL (one y'):       E_z[ -log p~(S(z) | y') - log|det J_S(z)| ]

#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "cnf/diffcore.hpp"
#include "cnf/flows.hpp"
#include "cnf/problems.hpp"

namespace cnf {

// ---------------------------------------------------------------------------
// Forward KL

/// Batch mean of 0.5 (|z_x|^2 + |z_y|^2) - logdet; gradients are added to
/// both sub-flows' gradient buffers.
inline double forward_kl_loss(ConditionalFlow& t, const Matrix& x, const Matrix& y) {
  if (x.cols() == 0 || x.cols() != y.cols()) throw ConfigError("forward KL needs a nonempty batch of pairs");
  ConditionalTape tape;
  auto r = t.forward(x, y, &tape);
  const Vector terms = 0.5 * (r.z_x.colwise().squaredNorm() + r.z_y.colwise().squaredNorm()).transpose() - r.logdet;
  for (Eigen::Index i = 0; i < terms.size(); ++i)
    if (!std::isfinite(terms(i))) throw NumericError("non-finite forward-KL term at sample " + std::to_string(i));
  const double inv_b = 1.0 / static_cast<double>(x.cols());
  const Vector g_ld = Vector::Constant(x.cols(), -inv_b);
  t.flow_y.backward(tape.y, inv_b * r.z_y, g_ld, t.flow_y.params().grads());
  t.flow_x.backward(tape.x, inv_b * r.z_x, g_ld, t.flow_x.params().grads());
  return terms.mean();
}

inline double forward_kl_loss(ConditionalFlow& t, const JointBatch& batch) {
  return forward_kl_loss(t, batch.x, batch.y);
}

// ---------------------------------------------------------------------------
// Likelihood and posterior targets

struct LikelihoodValue {
  double value = 0.0;
  Vector grad;
};

/// Batched log N(y; A x + mu_eps, Sigma_eps) and its x-gradient
/// A^T Sigma_eps^-1 (y - A x - mu_eps).
inline void gaussian_log_likelihood(const LinearGaussianProblem& p, const Matrix& x, const Vector& y, Vector& value,
                                    Matrix& grad) {
  if (static_cast<std::size_t>(x.rows()) != p.nx() || static_cast<std::size_t>(y.size()) != p.ny())
    throw DimensionError("likelihood arguments do not match the problem dimensions");
  if ((p.noise_var.array() <= 0.0).any()) throw ConfigError("noise covariance is singular");
  Matrix resid = (-(p.A * x)).colwise() + (y - p.noise_mean);
  const Vector w = p.noise_var.cwiseInverse();
  const double norm = -0.5 * (p.noise_var.array().log().sum() + static_cast<double>(p.ny()) * kLog2Pi);
  Matrix weighted = w.asDiagonal() * resid;
  value = (-0.5 * (resid.array() * weighted.array()).colwise().sum()).matrix().transpose();
  value.array() += norm;
  grad = p.A.transpose() * weighted;
}

inline LikelihoodValue gaussian_log_likelihood(const LinearGaussianProblem& p, const Vector& x, const Vector& y) {
  Vector v;
  Matrix g;
  gaussian_log_likelihood(p, Matrix(x), y, v, g);
  return {v(0), g.col(0)};
}

/// x -> (log p~(x | y'), d/dx) evaluated column-wise.
class LogPosteriorTarget {
 public:
  using BatchFn = std::function<void(const Matrix& x, Vector& value, Matrix& grad)>;

  LogPosteriorTarget(std::size_t dim, BatchFn fn) : dim_(dim), fn_(std::move(fn)) {}

  std::size_t dim() const noexcept { return dim_; }

  void evaluate(const Matrix& x, Vector& value, Matrix& grad) const {
    if (static_cast<std::size_t>(x.rows()) != dim_) throw DimensionError("target evaluated at the wrong dimension");
    fn_(x, value, grad);
  }

  LikelihoodValue operator()(const Vector& x) const {
    Vector v;
    Matrix g;
    evaluate(Matrix(x), v, g);
    return {v(0), g.col(0)};
  }

  double value(const Vector& x) const { return (*this)(x).value; }

 private:
  std::size_t dim_;
  BatchFn fn_;
};

struct AnalyticGaussianPrior {
  Vector mean;
  Matrix cov;
};

/// Reuses a trained conditional flow's posterior p_T(x | y_cond) as prior.
struct FlowPosteriorPrior {
  std::shared_ptr<const ConditionalFlow> flow;
  Vector y_cond;
};

using PriorChoice = std::variant<AnalyticGaussianPrior, FlowPosteriorPrior>;

/// Unnormalized log posterior: log-likelihood + log-prior.
inline LogPosteriorTarget make_log_posterior(const LinearGaussianProblem& problem, const PriorChoice& prior,
                                             const Vector& y_obs) {
  if (static_cast<std::size_t>(y_obs.size()) != problem.ny()) throw DimensionError("observation has the wrong dimension");
  const auto nx = problem.nx();
  if (const auto* g = std::get_if<AnalyticGaussianPrior>(&prior)) {
    if (static_cast<std::size_t>(g->mean.size()) != nx || static_cast<std::size_t>(g->cov.rows()) != nx)
      throw DimensionError("Gaussian prior does not match the problem dimension");
    Eigen::LLT<Matrix> llt(g->cov);
    if (llt.info() != Eigen::Success) throw ConfigError("prior covariance is not positive definite");
    auto precision = std::make_shared<const Matrix>(llt.solve(Matrix::Identity(g->cov.rows(), g->cov.cols())));
    const double norm = -llt.matrixLLT().diagonal().array().log().sum() - 0.5 * static_cast<double>(nx) * kLog2Pi;
    return LogPosteriorTarget(nx, [problem, y_obs, mean = g->mean, precision, norm](const Matrix& x, Vector& value,
                                                                                      Matrix& grad) {
      gaussian_log_likelihood(problem, x, y_obs, value, grad);
      Matrix centred = x.colwise() - mean;
      Matrix pc = (*precision) * centred;
      value.array() += (-0.5 * (centred.array() * pc.array()).colwise().sum()).transpose() + norm;
      grad -= pc;
    });
  }
  const auto& fp = std::get<FlowPosteriorPrior>(prior);
  if (!fp.flow) throw ConfigError("flow prior is empty");
  if (fp.flow->nx() != nx || static_cast<std::size_t>(fp.y_cond.size()) != fp.flow->ny())
    throw DimensionError("flow prior does not match the problem dimensions");
  return LogPosteriorTarget(nx, [problem, y_obs, fp](const Matrix& x, Vector& value, Matrix& grad) {
    gaussian_log_likelihood(problem, x, y_obs, value, grad);
    FlowTape tape;
    auto r = fp.flow->flow_x.forward(x, Matrix(fp.y_cond), &tape);
    value += ConditionalFlow::standard_normal_log_density(r.value) + r.logdet;
    grad += fp.flow->flow_x.backward(tape, -r.value, Vector::Ones(x.cols()), {});
  });
}

// ---------------------------------------------------------------------------
// Reverse KL

/// A trainable sampler z -> x with log|det dx/dz|.
template <class G>
concept Generator = requires(G& g, const G& cg, const Matrix& z, typename G::Tape& tape, const Vector& gl) {
  { cg.dim() } -> std::convertible_to<std::size_t>;
  { cg.generate(z, &tape) } -> std::same_as<FlowResult>;
  g.backward(tape, z, gl);
  { g.params() } -> std::same_as<ParamStore&>;
};

/// Batch mean of -log p~(S(z)) - log|det J_S(z)|; gradients are added to
/// s.params().grads().
template <Generator G>
double reverse_kl_loss(G& s, const LogPosteriorTarget& target, const Matrix& z) {
  if (z.cols() == 0) throw ConfigError("reverse KL needs a nonempty latent batch");
  if (target.dim() != s.dim()) throw DimensionError("generator and target dimensions differ");
  typename G::Tape tape;
  FlowResult gen = s.generate(z, &tape);
  Vector value;
  Matrix grad;
  target.evaluate(gen.value, value, grad);
  for (Eigen::Index i = 0; i < value.size(); ++i)
    if (!std::isfinite(value(i)) || !std::isfinite(gen.logdet(i)))
      throw NumericError("non-finite reverse-KL term at sample " + std::to_string(i));
  const double inv_b = 1.0 / static_cast<double>(z.cols());
  s.backward(tape, -inv_b * grad, Vector::Constant(z.cols(), -inv_b));
  return (-value - gen.logdet).mean();
}

/// E[-log N(z; 0, I)] for z ~ N(0, I_d). Adding it to -log Z gives the value
/// the reverse-KL objective attains at the exact posterior.
inline double standard_normal_entropy(std::size_t d) {
  return 0.5 * static_cast<double>(d) * (1.0 + kLog2Pi);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW); 0 is plain Adam
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  AdamState() = default;
  AdamState(const ParamStore& params, AdamConfig cfg) : config(cfg), m(params.size(), 0.0), v(params.size(), 0.0) {}
};

/// Bias-corrected Adam update in place; `lr` overrides config.lr when >= 0.
inline void adam_step(AdamState& s, ParamStore& params, double lr = -1.0) {
  if (s.m.size() != params.size()) throw DimensionError("Adam state does not match the parameter store");
  const double rate = lr >= 0.0 ? lr : s.config.lr;
  ++s.step;
  const double c1 = 1.0 - std::pow(s.config.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.config.beta2, static_cast<double>(s.step));
  auto val = params.values();
  auto grad = params.grads();
  for (std::size_t i = 0; i < val.size(); ++i) {
    s.m[i] = s.config.beta1 * s.m[i] + (1.0 - s.config.beta1) * grad[i];
    s.v[i] = s.config.beta2 * s.v[i] + (1.0 - s.config.beta2) * grad[i] * grad[i];
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    val[i] -= rate * (mhat / (std::sqrt(vhat) + s.config.eps) + s.config.weight_decay * val[i]);
  }
}

// ---------------------------------------------------------------------------
// Training loops

enum class Objective { forward_kl, reverse_kl };
enum class LrSchedule { constant, cosine };

struct TrainConfig {
  Objective objective = Objective::forward_kl;
  std::size_t iterations = 1000;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  AdamConfig adam{};
  LrSchedule schedule = LrSchedule::constant;
  double lr_final_fraction = 0.1;  // cosine schedule floor, as a fraction of adam.lr
  std::string mode = "supervised";

  double lr_at(std::size_t it) const {
    if (schedule == LrSchedule::constant || iterations <= 1) return adam.lr;
    const double frac = static_cast<double>(it) / static_cast<double>(iterations - 1);
    const double floor = adam.lr * lr_final_fraction;
    return floor + 0.5 * (adam.lr - floor) * (1.0 + std::cos(std::numbers::pi * frac));
  }

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(adam.lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(lr_final_fraction > 0.0 && lr_final_fraction <= 1.0)) throw ConfigError("lr_final_fraction must lie in (0, 1]");
  }
};

struct LossTrace {
  std::vector<double> values;
  std::uint64_t seed = 0;
  std::string mode;
  std::size_t batch_size = 0;
  std::size_t iterations = 0;  // completed iterations == values.size()
  double wall_seconds = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

namespace detail {

template <class Step>
LossTrace run_loop(const TrainConfig& cfg, Step&& step) {
  cfg.validate();
  LossTrace trace;
  trace.seed = cfg.seed;
  trace.mode = cfg.mode;
  trace.batch_size = cfg.batch_size;
  trace.values.reserve(cfg.iterations);
  const auto start = std::chrono::steady_clock::now();
  try {
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      const double loss = step(it, cfg.lr_at(it));
      if (!std::isfinite(loss)) throw NumericError("non-finite loss at iteration " + std::to_string(it));
      trace.values.push_back(loss);
    }
  } catch (const NumericError& e) {
    trace.aborted = true;
    trace.abort_reason = e.what();
  }
  trace.iterations = trace.values.size();
  trace.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return trace;
}

}  // namespace detail

/// Forward-KL training on stored pairs; minibatches are drawn with
/// replacement from a stream seeded by cfg.seed.
inline LossTrace train(ConditionalFlow& t, const JointBatch& data, const TrainConfig& cfg) {
  if (cfg.objective != Objective::forward_kl) throw ConfigError("paired data requires the forward-KL objective");
  if (data.size() == 0) throw ConfigError("training corpus is empty");
  Rng rng(cfg.seed);
  AdamState sy(t.flow_y.params(), cfg.adam), sx(t.flow_x.params(), cfg.adam);
  const auto b = static_cast<Eigen::Index>(cfg.batch_size);
  Matrix xb(data.x.rows(), b), yb(data.y.rows(), b);
  return detail::run_loop(cfg, [&](std::size_t, double lr) {
    for (Eigen::Index j = 0; j < b; ++j) {
      const auto k = static_cast<Eigen::Index>(rng() % data.size());
      xb.col(j) = data.x.col(k);
      yb.col(j) = data.y.col(k);
    }
    t.flow_y.params().zero_grads();
    t.flow_x.params().zero_grads();
    const double loss = forward_kl_loss(t, xb, yb);
    adam_step(sy, t.flow_y.params(), lr);
    adam_step(sx, t.flow_x.params(), lr);
    return loss;
  });
}

/// Reverse-KL training with fresh standard-normal latents every iteration.
template <Generator G>
LossTrace train(G& s, const LogPosteriorTarget& target, const TrainConfig& cfg) {
  if (cfg.objective != Objective::reverse_kl) throw ConfigError("a posterior target requires the reverse-KL objective");
  Rng rng(cfg.seed);
  AdamState state(s.params(), cfg.adam);
  const auto d = static_cast<Eigen::Index>(s.dim());
  const auto b = static_cast<Eigen::Index>(cfg.batch_size);
  return detail::run_loop(cfg, [&](std::size_t, double lr) {
    Matrix z = standard_normal(d, b, rng);
    s.params().zero_grads();
    const double loss = reverse_kl_loss(s, target, z);
    adam_step(state, s.params(), lr);
    return loss;
  });
}

}  // namespace cnf
