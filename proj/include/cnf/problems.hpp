#pragma once

// Linear-Gaussian inverse problems with closed-form posterior and evidence,
// a brute-force grid integrator for 1-D/2-D checks, and the synthetic image
// problems (denoising and subsampled sensing).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cnf/diffcore.hpp"
#include "cnf/flows.hpp"

namespace cnf {

/// y = A x + eps, eps ~ N(noise_mean, diag(noise_var)), x ~ N(prior_mean, prior_cov).
struct LinearGaussianProblem {
  Matrix A;
  Vector noise_mean;
  Vector noise_var;
  Vector prior_mean;
  Matrix prior_cov;

  std::size_t nx() const noexcept { return static_cast<std::size_t>(A.cols()); }
  std::size_t ny() const noexcept { return static_cast<std::size_t>(A.rows()); }

  void validate() const {
    if (A.rows() == 0 || A.cols() == 0) throw ConfigError("forward operator must be non-empty");
    if (noise_mean.size() != A.rows() || noise_var.size() != A.rows())
      throw DimensionError("noise law does not match the operator's rows");
    if (prior_mean.size() != A.cols() || prior_cov.rows() != A.cols() || prior_cov.cols() != A.cols())
      throw DimensionError("prior law does not match the operator's columns");
    if (!all_finite(A) || !all_finite(noise_mean) || !all_finite(noise_var) || !all_finite(prior_mean) ||
        !all_finite(prior_cov))
      throw ConfigError("problem contains non-finite entries");
    if ((noise_var.array() <= 0.0).any()) throw ConfigError("noise variances must be strictly positive");
    if ((prior_cov.diagonal().array() <= 0.0).any()) throw ConfigError("prior variances must be strictly positive");
  }
};

/// Independent Gaussian law with diagonal covariance.
struct DiagonalGaussian {
  Vector mean;
  Vector var;
};

struct JointBatch {
  Matrix x;  // nx x n
  Matrix y;  // ny x n
  std::size_t size() const noexcept { return static_cast<std::size_t>(x.cols()); }
};

/// A_ij ~ N(0, 1/nx), mu_x = 1, Sigma_x = diag(1..nx), mu_eps = 0, Sigma_eps = 0.1 I.
inline LinearGaussianProblem make_supervised_gaussian(std::uint64_t seed, std::size_t nx = 12, std::size_t ny = 6) {
  if (nx == 0 || ny == 0) throw ConfigError("problem dimensions must be positive");
  Rng rng(derive_seed(seed, "operator"));
  LinearGaussianProblem p;
  p.A = standard_normal(static_cast<Eigen::Index>(ny), static_cast<Eigen::Index>(nx), rng) /
        std::sqrt(static_cast<double>(nx));
  p.noise_mean = Vector::Zero(static_cast<Eigen::Index>(ny));
  p.noise_var = Vector::Constant(static_cast<Eigen::Index>(ny), 0.1);
  p.prior_mean = Vector::Ones(static_cast<Eigen::Index>(nx));
  p.prior_cov = Vector::LinSpaced(static_cast<Eigen::Index>(nx), 1.0, static_cast<double>(nx)).asDiagonal();
  return p;
}

inline DiagonalGaussian prior_law(const LinearGaussianProblem& p) {
  return {p.prior_mean, p.prior_cov.diagonal()};
}

struct ShiftedProblem {
  DiagonalGaussian data_law;      // law of the new unknowns x'
  LinearGaussianProblem problem;  // inference problem: same operator, noise and prior
};

/// x' ~ N(3 mu_x, 1.96 Sigma_x^0.3), power taken on the diagonal.
inline ShiftedProblem make_shifted_problem(const LinearGaussianProblem& base) {
  base.validate();
  Matrix off = base.prior_cov;
  off.diagonal().setZero();
  if (off.cwiseAbs().maxCoeff() != 0.0) throw ConfigError("shifted problem requires a diagonal prior covariance");
  ShiftedProblem s;
  s.data_law.mean = 3.0 * base.prior_mean;
  s.data_law.var = 1.96 * base.prior_cov.diagonal().array().pow(0.3).matrix();
  s.problem = base;
  return s;
}

inline JointBatch sample_joint(const LinearGaussianProblem& p, const DiagonalGaussian& law, std::size_t n,
                               std::uint64_t seed) {
  if (n == 0) throw ConfigError("sample_joint needs n >= 1");
  if (law.mean.size() != p.A.cols() || law.var.size() != p.A.cols())
    throw DimensionError("data law does not match the problem dimension");
  Rng rng(seed);
  const auto cols = static_cast<Eigen::Index>(n);
  JointBatch b;
  b.x = standard_normal(p.A.cols(), cols, rng);
  b.x = (law.var.cwiseSqrt().asDiagonal() * b.x).colwise() + law.mean;
  Matrix eps = standard_normal(p.A.rows(), cols, rng);
  eps = (p.noise_var.cwiseSqrt().asDiagonal() * eps).colwise() + p.noise_mean;
  b.y = p.A * b.x + eps;
  return b;
}

struct GaussianPosterior {
  Vector mean;
  Matrix cov;
};

/// cov = (Sigma_x^-1 + A^T Sigma_eps^-1 A)^-1,
/// mean = cov (Sigma_x^-1 mu_x + A^T Sigma_eps^-1 (y - mu_eps)).
inline GaussianPosterior analytic_posterior(const LinearGaussianProblem& p, const Vector& y) {
  p.validate();
  if (y.size() != p.A.rows()) throw DimensionError("observation has the wrong dimension");
  Eigen::LLT<Matrix> prior_llt(p.prior_cov);
  if (prior_llt.info() != Eigen::Success) throw NumericError("prior covariance is not positive definite");
  const Matrix prior_prec = prior_llt.solve(Matrix::Identity(p.A.cols(), p.A.cols()));
  const Vector w = p.noise_var.cwiseInverse();
  Matrix prec = prior_prec + p.A.transpose() * w.asDiagonal() * p.A;
  prec = 0.5 * (prec + prec.transpose());

  Eigen::SelfAdjointEigenSolver<Matrix> eig(prec, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > 1e12) throw NumericError("posterior precision is ill-conditioned");

  Eigen::LLT<Matrix> llt(prec);
  GaussianPosterior post;
  post.cov = llt.solve(Matrix::Identity(p.A.cols(), p.A.cols()));
  post.cov = 0.5 * (post.cov + post.cov.transpose());
  post.mean = llt.solve(prior_prec * p.prior_mean + p.A.transpose() * (w.asDiagonal() * (y - p.noise_mean)));
  return post;
}

/// Log density of a multivariate normal, with the normalization constant.
inline double gaussian_log_density(const Vector& x, const Vector& mean, const Matrix& cov) {
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericError("covariance is not positive definite");
  const Vector r = x - mean;
  const Vector white = llt.matrixL().solve(r);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * white.squaredNorm() - 0.5 * logdet - 0.5 * static_cast<double>(x.size()) * kLog2Pi;
}

/// log N(y; A mu_x + mu_eps, A Sigma_x A^T + Sigma_eps).
inline double log_evidence(const LinearGaussianProblem& p, const Vector& y) {
  p.validate();
  if (y.size() != p.A.rows()) throw DimensionError("observation has the wrong dimension");
  Matrix cov = p.A * p.prior_cov * p.A.transpose();
  cov.diagonal() += p.noise_var;
  return gaussian_log_density(y, p.A * p.prior_mean + p.noise_mean, cov);
}

// ---------------------------------------------------------------------------
// Grid oracle

struct GridBox {
  Vector lower;
  Vector upper;
};

struct GridMoments {
  double normalization = 0.0;
  Vector mean;
  Matrix cov;
};

/// Trapezoid-rule mass, mean and covariance of exp(log_density) on a 1-D or
/// 2-D box.
inline GridMoments grid_oracle(const std::function<double(const Vector&)>& log_density, const GridBox& box,
                               std::size_t points) {
  const auto dims = box.lower.size();
  if (dims < 1 || dims > 2) throw UnsupportedError("grid oracle supports 1 or 2 dimensions");
  if (box.upper.size() != dims) throw DimensionError("grid box bounds disagree in dimension");
  if (points < 2 || points > 401) throw ConfigError("grid oracle needs between 2 and 401 points per dimension");
  if (((box.upper - box.lower).array() <= 0.0).any()) throw ConfigError("grid box must have positive extent");

  const auto n = static_cast<Eigen::Index>(points);
  const Vector h = (box.upper - box.lower) / static_cast<double>(points - 1);
  auto node = [&](Eigen::Index d, Eigen::Index i) { return box.lower(d) + static_cast<double>(i) * h(d); };
  auto weight = [&](Eigen::Index i) { return (i == 0 || i == n - 1) ? 0.5 : 1.0; };

  const Eigen::Index total = dims == 1 ? n : n * n;
  std::vector<double> logs(static_cast<std::size_t>(total));
  std::vector<Vector> xs(static_cast<std::size_t>(total));
  std::vector<double> ws(static_cast<std::size_t>(total));
  for (Eigen::Index k = 0; k < total; ++k) {
    Vector x(dims);
    const Eigen::Index i = dims == 1 ? k : k / n;
    x(0) = node(0, i);
    double w = weight(i) * h(0);
    if (dims == 2) {
      const Eigen::Index j = k % n;
      x(1) = node(1, j);
      w *= weight(j) * h(1);
    }
    const double l = log_density(x);
    if (std::isnan(l)) throw NumericError("grid oracle: NaN log density");
    logs[static_cast<std::size_t>(k)] = l;
    xs[static_cast<std::size_t>(k)] = std::move(x);
    ws[static_cast<std::size_t>(k)] = w;
  }
  const double peak = *std::max_element(logs.begin(), logs.end());
  if (!std::isfinite(peak)) throw NumericError("grid oracle: density vanishes on the whole grid");

  double mass = 0.0;
  Vector m1 = Vector::Zero(dims);
  Matrix m2 = Matrix::Zero(dims, dims);
  for (std::size_t k = 0; k < logs.size(); ++k) {
    const double f = ws[k] * std::exp(logs[k] - peak);
    mass += f;
    m1 += f * xs[k];
    m2 += f * xs[k] * xs[k].transpose();
  }
  GridMoments out;
  out.mean = m1 / mass;
  out.cov = m2 / mass - out.mean * out.mean.transpose();
  out.normalization = mass * std::exp(peak);
  return out;
}

// ---------------------------------------------------------------------------
// Sensing and images

/// Coordinate subsampling B (rows of the identity on `indices`); A = B^T B is
/// the 0/1 diagonal mask.
struct SensingOperator {
  std::size_t n = 0;
  std::vector<std::size_t> indices;  // sorted, unique

  Vector mask() const {
    Vector m = Vector::Zero(static_cast<Eigen::Index>(n));
    for (auto i : indices) m(static_cast<Eigen::Index>(i)) = 1.0;
    return m;
  }
  Matrix dense() const { return mask().asDiagonal(); }
};

inline SensingOperator make_sensing_operator(std::size_t n, double rate, std::uint64_t seed) {
  if (n == 0) throw ConfigError("sensing operator size must be positive");
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("sensing rate must lie in (0, 1]");
  const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(all[i], all[j]);
  }
  SensingOperator op{n, std::vector<std::size_t>(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count))};
  std::sort(op.indices.begin(), op.indices.end());
  return op;
}

/// Ricker wavelet sampled on integer taps with central-lobe width `width` px.
inline std::vector<double> ricker_taps(double width) {
  const double f = std::numbers::sqrt2 / (std::numbers::pi * width);
  const int half = static_cast<int>(std::ceil(3.0 * width));
  std::vector<double> taps;
  for (int t = -half; t <= half; ++t) {
    const double a = std::numbers::pi * f * static_cast<double>(t);
    taps.push_back((1.0 - 2.0 * a * a) * std::exp(-a * a));
  }
  return taps;
}

/// Layered reflectivity image, row-major (row = depth), n*n values with zero
/// mean and unit max magnitude.
inline Vector synth_layered_image(std::size_t n, std::uint64_t seed) {
  if (n < 8) throw ConfigError("layered images need side >= 8");
  Rng rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double side = static_cast<double>(n);

  const int layers = 4 + static_cast<int>(rng() % 5);  // 4..8 interfaces
  const double common_dip = 0.3 * (uni(rng) - 0.5);
  std::vector<double> depth(static_cast<std::size_t>(layers)), dip(depth.size()), jump(depth.size());
  for (std::size_t k = 0; k < depth.size(); ++k) {
    depth[k] = side * (0.1 + 0.8 * uni(rng));
    dip[k] = common_dip + 0.1 * (uni(rng) - 0.5);
    jump[k] = normal(rng);
  }

  // Reflectivity spikes, split linearly between the two nearest rows.
  Matrix refl = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t k = 0; k < depth.size(); ++k) {
      const double pos = depth[k] + dip[k] * (static_cast<double>(c) - 0.5 * side);
      const double fl = std::floor(pos);
      const double frac = pos - fl;
      const auto r0 = static_cast<long>(fl);
      if (r0 >= 0 && r0 < static_cast<long>(n)) refl(r0, static_cast<Eigen::Index>(c)) += (1.0 - frac) * jump[k];
      if (r0 + 1 >= 0 && r0 + 1 < static_cast<long>(n)) refl(r0 + 1, static_cast<Eigen::Index>(c)) += frac * jump[k];
    }
  }

  const auto taps = ricker_taps(std::max(side / 16.0, 2.0));
  const long half = static_cast<long>(taps.size() / 2);
  Matrix img = Matrix::Zero(refl.rows(), refl.cols());
  for (Eigen::Index c = 0; c < img.cols(); ++c)
    for (long r = 0; r < static_cast<long>(n); ++r) {
      double acc = 0.0;
      for (long t = -half; t <= half; ++t) {
        const long src = r - t;
        if (src >= 0 && src < static_cast<long>(n)) acc += taps[static_cast<std::size_t>(t + half)] * refl(src, c);
      }
      img(r, c) = acc;
    }

  Vector flat(static_cast<Eigen::Index>(n * n));
  for (Eigen::Index r = 0; r < img.rows(); ++r)
    for (Eigen::Index c = 0; c < img.cols(); ++c) flat(r * img.cols() + c) = img(r, c);
  flat.array() -= flat.mean();
  const double peak = flat.cwiseAbs().maxCoeff();
  if (peak == 0.0) throw NumericError("degenerate layered image");
  flat /= peak;
  flat.array() -= flat.mean();
  return flat;
}

struct ImageProblem {
  std::size_t side = 0;
  std::optional<SensingOperator> sensing;  // empty: identity operator
  double noise_var = 1.0;

  std::size_t size() const noexcept { return side * side; }

  Vector apply(const Vector& x) const {
    if (!sensing) return x;
    return sensing->mask().cwiseProduct(x);
  }

  /// Likelihood as a LinearGaussianProblem (the prior fields are a standard
  /// normal placeholder; image posteriors use a flow prior).
  LinearGaussianProblem likelihood() const {
    const auto n = static_cast<Eigen::Index>(size());
    LinearGaussianProblem p;
    p.A = sensing ? sensing->dense() : Matrix(Matrix::Identity(n, n));
    p.noise_mean = Vector::Zero(n);
    p.noise_var = Vector::Constant(n, noise_var);
    p.prior_mean = Vector::Zero(n);
    p.prior_cov = Matrix::Identity(n, n);
    return p;
  }

  Vector observe(const Vector& x, Rng& rng) const {
    return apply(x) + std::sqrt(noise_var) * standard_normal(static_cast<Eigen::Index>(size()), 1, rng).col(0);
  }
};

struct ImageProblems {
  ImageProblem supervised;    // y = x + eps, Sigma_eps = 1.2 I
  ImageProblem unsupervised;  // y' = B^T B x' + eps', Sigma_eps' = 0.2 I, 30% sampling
  std::uint64_t corpus_seed = 0;

  // Training and test images come from disjoint seeds (even vs odd offsets).
  std::uint64_t train_seed(std::size_t i) const { return corpus_seed + 2 * static_cast<std::uint64_t>(i); }
  std::uint64_t test_seed(std::size_t i) const { return corpus_seed + 2 * static_cast<std::uint64_t>(i) + 1; }
  Vector train_image(std::size_t i) const { return synth_layered_image(supervised.side, train_seed(i)); }
  Vector test_image(std::size_t i) const { return synth_layered_image(supervised.side, test_seed(i)); }
};

inline ImageProblems make_image_problems(std::size_t n, std::uint64_t seed, double rate = 0.3) {
  if (n < 8) throw ConfigError("image side must be >= 8");
  ImageProblems out;
  out.supervised = ImageProblem{n, std::nullopt, 1.2};
  out.unsupervised = ImageProblem{n, make_sensing_operator(n * n, rate, derive_seed(seed, "sensing")), 0.2};
  out.corpus_seed = derive_seed(seed, "corpus");
  return out;
}

/// Paired (x, y) corpus for the supervised image problem.
inline JointBatch sample_image_corpus(const ImageProblems& probs, std::size_t count, std::uint64_t seed) {
  const auto n = static_cast<Eigen::Index>(probs.supervised.size());
  JointBatch b{Matrix(n, static_cast<Eigen::Index>(count)), Matrix(n, static_cast<Eigen::Index>(count))};
  Rng rng(derive_seed(seed, "corpus-noise"));
  for (std::size_t i = 0; i < count; ++i) {
    Vector x = probs.train_image(i);
    b.y.col(static_cast<Eigen::Index>(i)) = probs.supervised.observe(x, rng);
    b.x.col(static_cast<Eigen::Index>(i)) = std::move(x);
  }
  return b;
}

}  // namespace cnf
