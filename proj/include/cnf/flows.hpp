#pragma once

// Affine coupling flows and the triangular conditional flow
//   T(x, y) = (T_x(x; y), T_y(y)).
//
// A coupling layer splits v into (v_a, v_b) with |v_a| = ceil(dim/2) and maps
//   v_b' = v_b * exp(s~) + t,   (s, t) = conditioner(v_a ++ cond),
//   s~ = clamp * tanh(s / clamp),
// so log|det J| = sum(s~). Layers alternate with fixed permutations.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "cnf/diffcore.hpp"

namespace cnf {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2 pi)

/// Broadcasts a single conditioning column across a batch.
inline Matrix broadcast_cond(const Matrix& cond, Eigen::Index cond_dim, Eigen::Index batch) {
  if (cond.rows() != cond_dim)
    throw DimensionError("conditioning input has " + std::to_string(cond.rows()) + " rows, expected " +
                         std::to_string(cond_dim));
  if (cond.cols() == batch) return cond;
  if (cond.cols() == 1 || cond_dim == 0) return cond_dim == 0 ? Matrix(0, batch) : Matrix(cond.replicate(1, batch));
  throw DimensionError("conditioning batch size does not match input batch");
}

// ---------------------------------------------------------------------------
// Coupling layer

struct CouplingTape {
  MlpTape mlp;
  Matrix squashed;    // tanh(s / clamp)
  Matrix scale;       // exp(s~) on the forward path, exp(-s~) on the inverse path
  Matrix passive_b;   // v_b input (forward) or v_b output (inverse)
};

struct CouplingLayer {
  std::size_t dim = 0;
  std::size_t cond_dim = 0;
  std::size_t d_a = 0;
  std::size_t d_b = 0;
  MlpSpec conditioner;
  double clamp = 2.0;
  bool constant_input = false;
  std::size_t first_entry = 0;
  std::ptrdiff_t index = 0;  // position in the owning flow, for error messages

  static CouplingLayer make(std::size_t dim, std::size_t cond_dim, std::vector<std::size_t> hidden, double clamp) {
    if (dim == 0) throw ConfigError("coupling layer dimension must be positive");
    if (!(clamp > 0.0)) throw ConfigError("coupling clamp must be positive");
    CouplingLayer c;
    c.dim = dim;
    c.cond_dim = cond_dim;
    if (dim == 1) {
      // Nothing to split; the single coordinate is driven by the condition.
      c.d_a = 0;
      c.d_b = 1;
    } else {
      c.d_a = (dim + 1) / 2;
      c.d_b = dim - c.d_a;
    }
    // With no active half and no condition the conditioner sees a constant 1,
    // which leaves a learnable elementwise affine map.
    c.constant_input = c.d_a + cond_dim == 0;
    c.conditioner = MlpSpec{c.constant_input ? 1 : c.d_a + cond_dim, std::move(hidden), 2 * c.d_b, Activation::tanh};
    c.conditioner.validate();
    c.clamp = clamp;
    return c;
  }

  Matrix conditioner_input(const Matrix& active, const Matrix& cond) const {
    if (constant_input) return Matrix::Ones(1, active.cols());
    Matrix h(static_cast<Eigen::Index>(d_a + cond_dim), active.cols());
    h.topRows(static_cast<Eigen::Index>(d_a)) = active.topRows(static_cast<Eigen::Index>(d_a));
    if (cond_dim > 0)
      h.bottomRows(static_cast<Eigen::Index>(cond_dim)) =
          broadcast_cond(cond, static_cast<Eigen::Index>(cond_dim), active.cols());
    return h;
  }

  /// Returns (s~, t) and fills tape->mlp / tape->squashed when requested.
  std::pair<Matrix, Matrix> scale_shift(const ParamStore& params, const Matrix& v, const Matrix& cond,
                                        CouplingTape* tape) const {
    const auto nb = static_cast<Eigen::Index>(d_b);
    Matrix out = mlp_forward(conditioner, params, first_entry, conditioner_input(v, cond), tape ? &tape->mlp : nullptr);
    if (!all_finite(out)) throw NumericError("non-finite conditioner output in coupling layer " + std::to_string(index));
    Matrix squashed = (out.topRows(nb) / clamp).array().tanh().matrix();
    Matrix s = clamp * squashed;
    if (tape) tape->squashed = squashed;
    return {std::move(s), out.bottomRows(nb)};
  }

  std::pair<Matrix, Vector> forward(const ParamStore& params, const Matrix& v, const Matrix& cond,
                                    CouplingTape* tape = nullptr) const {
    check_rows(v);
    const auto na = static_cast<Eigen::Index>(d_a), nb = static_cast<Eigen::Index>(d_b);
    auto [s, t] = scale_shift(params, v, cond, tape);
    Matrix scale = s.array().exp().matrix();
    Matrix out(v.rows(), v.cols());
    out.topRows(na) = v.topRows(na);
    out.bottomRows(nb) = (v.bottomRows(nb).array() * scale.array() + t.array()).matrix();
    if (tape) {
      tape->scale = std::move(scale);
      tape->passive_b = v.bottomRows(nb);
    }
    return {std::move(out), s.colwise().sum().transpose()};
  }

  /// Returns (v, log|det dv/dv_out|) = (v, -sum s~).
  std::pair<Matrix, Vector> inverse(const ParamStore& params, const Matrix& v_out, const Matrix& cond,
                                    CouplingTape* tape = nullptr) const {
    check_rows(v_out);
    const auto na = static_cast<Eigen::Index>(d_a), nb = static_cast<Eigen::Index>(d_b);
    auto [s, t] = scale_shift(params, v_out, cond, tape);
    Matrix inv_scale = (-s).array().exp().matrix();
    Matrix v(v_out.rows(), v_out.cols());
    v.topRows(na) = v_out.topRows(na);
    v.bottomRows(nb) = ((v_out.bottomRows(nb) - t).array() * inv_scale.array()).matrix();
    if (tape) {
      tape->scale = std::move(inv_scale);
      tape->passive_b = v.bottomRows(nb);
    }
    return {std::move(v), -s.colwise().sum().transpose()};
  }

  /// Cotangents (g_out, g_logdet) of a forward pass -> gradient wrt v.
  Matrix backward_forward(const ParamStore& params, const CouplingTape& tape, const Matrix& g_out,
                          const Vector& g_logdet, std::span<double> grads) const {
    const auto na = static_cast<Eigen::Index>(d_a), nb = static_cast<Eigen::Index>(d_b);
    Matrix g_b = g_out.bottomRows(nb);
    Matrix g_mlp(2 * nb, g_out.cols());
    Matrix g_s = (g_b.array() * tape.passive_b.array() * tape.scale.array()).matrix();
    g_s.rowwise() += g_logdet.transpose();
    g_mlp.topRows(nb) = (g_s.array() * (1.0 - tape.squashed.array().square())).matrix();
    g_mlp.bottomRows(nb) = g_b;
    Matrix g_h = mlp_backward(conditioner, params, first_entry, tape.mlp, g_mlp, grads);

    Matrix g_v(g_out.rows(), g_out.cols());
    g_v.topRows(na) = g_out.topRows(na) + g_h.topRows(na);
    g_v.bottomRows(nb) = (g_b.array() * tape.scale.array()).matrix();
    return g_v;
  }

  /// Cotangents (g_v, g_logdet) of an inverse pass -> gradient wrt v_out.
  Matrix backward_inverse(const ParamStore& params, const CouplingTape& tape, const Matrix& g_v,
                          const Vector& g_logdet, std::span<double> grads) const {
    const auto na = static_cast<Eigen::Index>(d_a), nb = static_cast<Eigen::Index>(d_b);
    Matrix g_b = g_v.bottomRows(nb);
    Matrix g_vout_b = (g_b.array() * tape.scale.array()).matrix();
    Matrix g_s = -(g_b.array() * tape.passive_b.array()).matrix();
    g_s.rowwise() -= g_logdet.transpose();
    Matrix g_mlp(2 * nb, g_v.cols());
    g_mlp.topRows(nb) = (g_s.array() * (1.0 - tape.squashed.array().square())).matrix();
    g_mlp.bottomRows(nb) = -g_vout_b;
    Matrix g_h = mlp_backward(conditioner, params, first_entry, tape.mlp, g_mlp, grads);

    Matrix g_out(g_v.rows(), g_v.cols());
    g_out.topRows(na) = g_v.topRows(na) + g_h.topRows(na);
    g_out.bottomRows(nb) = g_vout_b;
    return g_out;
  }

 private:
  void check_rows(const Matrix& v) const {
    if (static_cast<std::size_t>(v.rows()) != dim)
      throw DimensionError("coupling input has " + std::to_string(v.rows()) + " rows, expected " +
                               std::to_string(dim),
                           index);
  }
};

// ---------------------------------------------------------------------------
// Flow

enum class LayerKind : std::uint8_t { coupling = 0, reverse = 1, shuffle = 2, closing = 3 };

struct FlowLayer {
  LayerKind kind = LayerKind::coupling;
  std::uint64_t seed = 0;               // shuffle seed; 0 otherwise
  std::vector<Eigen::Index> perm;       // out[i] = in[perm[i]]
  std::size_t coupling = 0;             // index into Flow::couplings()
};

struct FlowConfig {
  std::size_t dim = 0;
  std::size_t cond_dim = 0;
  std::size_t n_layers = 8;  // coupling layers; permutations sit between them
  std::vector<std::size_t> hidden_widths{64};
  double clamp = 2.0;
  std::uint64_t seed = 0;
  // Append the inverse of the net permutation so a fresh flow is the identity
  // rather than a pure permutation.
  bool closed = false;

  friend bool operator==(const FlowConfig&, const FlowConfig&) = default;
};

/// Seeded Fisher-Yates; identical on every platform.
inline std::vector<Eigen::Index> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<Eigen::Index> p(n);
  std::iota(p.begin(), p.end(), Eigen::Index{0});
  Rng rng(seed);
  for (std::size_t i = n; i-- > 1;) std::swap(p[i], p[rng() % (i + 1)]);
  return p;
}

inline std::vector<Eigen::Index> reversal_permutation(std::size_t n) {
  std::vector<Eigen::Index> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<Eigen::Index>(n - 1 - i);
  return p;
}

inline Matrix apply_permutation(const std::vector<Eigen::Index>& perm, const Matrix& in) {
  Matrix out(in.rows(), in.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = in.row(perm[i]);
  return out;
}

inline Matrix apply_inverse_permutation(const std::vector<Eigen::Index>& perm, const Matrix& out) {
  Matrix in(out.rows(), out.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) in.row(perm[i]) = out.row(static_cast<Eigen::Index>(i));
  return in;
}

/// Fixed per-coordinate affine u = (v - shift) / scale. Empty vectors mean
/// identity. Not trainable; the supervised trainer sets it from corpus
/// statistics so conditioners see unit-scale inputs.
struct Standardizer {
  Vector shift;
  Vector scale;

  bool identity() const noexcept { return shift.size() == 0; }

  static Standardizer fit(const Matrix& data) {
    Standardizer s;
    s.shift = data.rowwise().mean();
    s.scale = ((data.colwise() - s.shift).array().square().rowwise().mean()).sqrt().matrix();
    s.scale = s.scale.cwiseMax(1e-6);
    return s;
  }

  void check(std::size_t dim) const {
    if (identity()) return;
    if (static_cast<std::size_t>(shift.size()) != dim || static_cast<std::size_t>(scale.size()) != dim)
      throw DimensionError("standardizer does not match the flow dimension");
    if (!all_finite(shift) || !all_finite(scale) || (scale.array() <= 0.0).any())
      throw ConfigError("standardizer scales must be finite and positive");
  }

  Matrix apply(const Matrix& v) const {
    if (identity() || v.rows() == 0) return v;
    return scale.cwiseInverse().asDiagonal() * (v.colwise() - shift);
  }
  Matrix unapply(const Matrix& u) const {
    if (identity() || u.rows() == 0) return u;
    return (scale.asDiagonal() * u).colwise() + shift;
  }
  /// log|det du/dv|.
  double log_det() const { return identity() ? 0.0 : -scale.array().log().sum(); }

  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

struct FlowTape {
  std::vector<CouplingTape> couplings;
  bool inverse = false;
};

struct FlowResult {
  Matrix value;
  Vector logdet;
};

class Flow {
 public:
  Flow() = default;

  /// Builds the layer schedule and initializes parameters (final conditioner
  /// layers zero, so the fresh flow is a pure permutation).
  static Flow create(const FlowConfig& cfg) {
    Flow f = skeleton(cfg, {});
    Rng rng(derive_seed(cfg.seed, "flow-init"));
    for (const auto& c : f.couplings_) init_mlp(f.params_, c.conditioner, c.first_entry, rng, true);
    return f;
  }

  /// Layer structure with zero parameters. `shuffle_seeds`, when nonempty,
  /// overrides the seeds derived from cfg.seed (checkpoint reconstruction).
  static Flow skeleton(const FlowConfig& cfg, const std::vector<std::uint64_t>& shuffle_seeds) {
    if (cfg.dim == 0) throw ConfigError("flow dimension must be positive");
    if (cfg.n_layers < 2 || cfg.n_layers % 2 != 0) throw ConfigError("flow needs an even number (>= 2) of coupling layers");
    Flow f;
    f.cfg_ = cfg;
    std::size_t shuffle_count = 0;
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      auto c = CouplingLayer::make(cfg.dim, cfg.cond_dim, cfg.hidden_widths, cfg.clamp);
      c.index = static_cast<std::ptrdiff_t>(f.layers_.size());
      c.first_entry = register_mlp(f.params_, c.conditioner, "coupling" + std::to_string(i));
      FlowLayer layer;
      layer.kind = LayerKind::coupling;
      layer.coupling = f.couplings_.size();
      f.couplings_.push_back(std::move(c));
      f.layers_.push_back(std::move(layer));
      if (i + 1 == cfg.n_layers) break;
      FlowLayer perm;
      if (i % 2 == 0) {
        perm.kind = LayerKind::reverse;
        perm.perm = reversal_permutation(cfg.dim);
      } else {
        perm.kind = LayerKind::shuffle;
        perm.seed = shuffle_seeds.empty() ? derive_seed(cfg.seed, "flow-perm", i)
                                          : shuffle_seeds.at(shuffle_count);
        perm.perm = seeded_permutation(cfg.dim, perm.seed);
        ++shuffle_count;
      }
      f.layers_.push_back(std::move(perm));
    }
    if (!shuffle_seeds.empty() && shuffle_seeds.size() != shuffle_count)
      throw ConfigError("shuffle seed count does not match the layer schedule");
    if (cfg.closed) {
      // net[i] is the input coordinate that lands at output i.
      std::vector<Eigen::Index> net(cfg.dim);
      std::iota(net.begin(), net.end(), Eigen::Index{0});
      for (const auto& l : f.layers_) {
        if (l.kind == LayerKind::coupling) continue;
        std::vector<Eigen::Index> next(cfg.dim);
        for (std::size_t i = 0; i < cfg.dim; ++i) next[i] = net[static_cast<std::size_t>(l.perm[i])];
        net = std::move(next);
      }
      FlowLayer close;
      close.kind = LayerKind::closing;
      close.perm.resize(cfg.dim);
      for (std::size_t i = 0; i < cfg.dim; ++i) close.perm[static_cast<std::size_t>(net[i])] = static_cast<Eigen::Index>(i);
      f.layers_.push_back(std::move(close));
    }
    return f;
  }

  const FlowConfig& config() const noexcept { return cfg_; }
  std::size_t dim() const noexcept { return cfg_.dim; }
  std::size_t cond_dim() const noexcept { return cfg_.cond_dim; }
  const std::vector<FlowLayer>& layers() const noexcept { return layers_; }
  const std::vector<CouplingLayer>& couplings() const noexcept { return couplings_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  const Standardizer& input_standardizer() const noexcept { return input_norm_; }
  const Standardizer& cond_standardizer() const noexcept { return cond_norm_; }

  void set_standardization(Standardizer input, Standardizer cond) {
    input.check(cfg_.dim);
    cond.check(cfg_.cond_dim);
    input_norm_ = std::move(input);
    cond_norm_ = std::move(cond);
  }

  std::vector<std::uint64_t> shuffle_seeds() const {
    std::vector<std::uint64_t> s;
    for (const auto& l : layers_)
      if (l.kind == LayerKind::shuffle) s.push_back(l.seed);
    return s;
  }

  /// Closed-form parameter count of the schedule.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& c : couplings_) n += c.conditioner.parameter_count();
    return n;
  }

  FlowResult forward(const Matrix& v, const Matrix& cond, FlowTape* tape = nullptr) const {
    check_input(v);
    if (tape) {
      tape->inverse = false;
      tape->couplings.assign(couplings_.size(), {});
    }
    Matrix h = input_norm_.apply(v);
    const Matrix c = cond_norm_.apply(cond);
    Vector logdet = Vector::Constant(v.cols(), input_norm_.log_det());
    for (const auto& layer : layers_) {
      if (layer.kind == LayerKind::coupling) {
        auto [out, ld] = couplings_[layer.coupling].forward(params_, h, c,
                                                            tape ? &tape->couplings[layer.coupling] : nullptr);
        h = std::move(out);
        logdet += ld;
      } else {
        h = apply_permutation(layer.perm, h);
      }
    }
    return {std::move(h), std::move(logdet)};
  }

  /// Exact inverse; logdet is log|det| of the inverse map (= -forward logdet).
  FlowResult inverse(const Matrix& z, const Matrix& cond, FlowTape* tape = nullptr) const {
    check_input(z);
    if (tape) {
      tape->inverse = true;
      tape->couplings.assign(couplings_.size(), {});
    }
    Matrix h = z;
    const Matrix c = cond_norm_.apply(cond);
    Vector logdet = Vector::Constant(z.cols(), -input_norm_.log_det());
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      if (it->kind == LayerKind::coupling) {
        auto [v, ld] = couplings_[it->coupling].inverse(params_, h, c,
                                                        tape ? &tape->couplings[it->coupling] : nullptr);
        h = std::move(v);
        logdet += ld;
      } else {
        h = apply_inverse_permutation(it->perm, h);
      }
    }
    return {input_norm_.unapply(h), std::move(logdet)};
  }

  /// Reverse pass for whichever direction the tape recorded. Returns the
  /// gradient wrt that pass's input; parameter gradients go into `grads`.
  Matrix backward(const FlowTape& tape, const Matrix& g_value, const Vector& g_logdet,
                  std::span<double> grads) const {
    if (tape.couplings.size() != couplings_.size()) throw DimensionError("flow tape does not match this flow");
    Matrix g = g_value;
    if (!tape.inverse) {
      for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
        if (it->kind == LayerKind::coupling)
          g = couplings_[it->coupling].backward_forward(params_, tape.couplings[it->coupling], g, g_logdet, grads);
        else
          g = apply_inverse_permutation(it->perm, g);
      }
      if (!input_norm_.identity()) g = input_norm_.scale.cwiseInverse().asDiagonal() * g;
    } else {
      if (!input_norm_.identity()) g = input_norm_.scale.asDiagonal() * g;
      for (const auto& layer : layers_) {
        if (layer.kind == LayerKind::coupling)
          g = couplings_[layer.coupling].backward_inverse(params_, tape.couplings[layer.coupling], g, g_logdet, grads);
        else
          g = apply_permutation(layer.perm, g);
      }
    }
    return g;
  }

 private:
  void check_input(const Matrix& v) const {
    if (static_cast<std::size_t>(v.rows()) != cfg_.dim)
      throw DimensionError("flow input has " + std::to_string(v.rows()) + " rows, expected " +
                           std::to_string(cfg_.dim));
  }

  FlowConfig cfg_;
  Standardizer input_norm_;
  Standardizer cond_norm_;
  std::vector<CouplingLayer> couplings_;
  std::vector<FlowLayer> layers_;
  ParamStore params_;
};

inline Flow init_flow(std::size_t dim, std::size_t cond_dim, std::size_t n_layers, std::vector<std::size_t> hidden,
                      double clamp, std::uint64_t seed) {
  return Flow::create(FlowConfig{dim, cond_dim, n_layers, std::move(hidden), clamp, seed});
}

struct FlowPoint {
  DenseArray value;
  double logdet = 0.0;
};

inline FlowPoint flow_forward(const Flow& f, const DenseArray& v, const DenseArray& cond) {
  Matrix c = cond.size() ? Matrix(cond.as_vector()) : Matrix(0, 1);
  auto r = f.forward(Matrix(v.as_vector()), c);
  return {DenseArray::from_vector(r.value.col(0)), r.logdet(0)};
}

inline DenseArray flow_inverse(const Flow& f, const DenseArray& z, const DenseArray& cond) {
  Matrix c = cond.size() ? Matrix(cond.as_vector()) : Matrix(0, 1);
  return DenseArray::from_vector(f.inverse(Matrix(z.as_vector()), c).value.col(0));
}

// ---------------------------------------------------------------------------
// Conditional flow

struct LatentPair {
  DenseArray z_x;
  DenseArray z_y;
  double logdet = 0.0;
};

struct LatentBatch {
  Matrix z_x;
  Matrix z_y;
  Vector logdet;
};

struct ConditionalTape {
  FlowTape y;
  FlowTape x;
};

struct ConditionalFlowConfig {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::size_t n_layers = 8;
  std::vector<std::size_t> hidden_widths{64};
  double clamp = 2.0;
  std::uint64_t seed = 0;
};

class ConditionalFlow {
 public:
  Flow flow_y;  // T_y : Y -> Z_y
  Flow flow_x;  // T_x : X -> Z_x, conditioned on raw y

  static ConditionalFlow create(const ConditionalFlowConfig& c) {
    if (c.nx == 0 || c.ny == 0) throw ConfigError("conditional flow dimensions must be positive");
    ConditionalFlow t;
    t.flow_y = Flow::create({c.ny, 0, c.n_layers, c.hidden_widths, c.clamp, derive_seed(c.seed, "T_y")});
    t.flow_x = Flow::create({c.nx, c.ny, c.n_layers, c.hidden_widths, c.clamp, derive_seed(c.seed, "T_x")});
    return t;
  }

  /// Sets both sub-flows' standardizers from a paired corpus.
  void standardize_from(const Matrix& x, const Matrix& y) {
    auto sy = Standardizer::fit(y);
    flow_y.set_standardization(sy, {});
    flow_x.set_standardization(Standardizer::fit(x), sy);
  }

  std::size_t nx() const noexcept { return flow_x.dim(); }
  std::size_t ny() const noexcept { return flow_y.dim(); }

  LatentBatch forward(const Matrix& x, const Matrix& y, ConditionalTape* tape = nullptr) const {
    if (static_cast<std::size_t>(y.rows()) != ny()) throw DimensionError("y has the wrong dimension");
    auto ry = flow_y.forward(y, Matrix(0, y.cols()), tape ? &tape->y : nullptr);
    auto rx = flow_x.forward(x, y, tape ? &tape->x : nullptr);
    return {std::move(rx.value), std::move(ry.value), rx.logdet + ry.logdet};
  }

  /// x-component of T^{-1}(z_x, T_y(y)); the triangular structure reduces it
  /// to inverting T_x at condition y.
  Matrix sample(const Matrix& y, const Matrix& z_x) const { return flow_x.inverse(z_x, y).value; }

  /// log N(z_x; 0, I) + log|det dT_x/dx| per column.
  Vector log_density(const Matrix& x, const Matrix& y) const {
    auto r = flow_x.forward(x, y);
    return standard_normal_log_density(r.value) + r.logdet;
  }

  static Vector standard_normal_log_density(const Matrix& z) {
    return (-0.5 * z.colwise().squaredNorm().array() - 0.5 * static_cast<double>(z.rows()) * kLog2Pi).matrix().transpose();
  }
};

inline ConditionalFlow init_cond_flow(std::size_t nx, std::size_t ny, std::size_t n_layers,
                                      std::vector<std::size_t> hidden, double clamp, std::uint64_t seed) {
  return ConditionalFlow::create({nx, ny, n_layers, std::move(hidden), clamp, seed});
}

inline LatentPair cond_flow_forward(const ConditionalFlow& t, const DenseArray& x, const DenseArray& y) {
  auto r = t.forward(Matrix(x.as_vector()), Matrix(y.as_vector()));
  return {DenseArray::from_vector(r.z_x.col(0)), DenseArray::from_vector(r.z_y.col(0)), r.logdet(0)};
}

inline DenseArray conditional_sample(const ConditionalFlow& t, const DenseArray& y, const DenseArray& z_x) {
  return DenseArray::from_vector(t.sample(Matrix(y.as_vector()), Matrix(z_x.as_vector())).col(0));
}

inline double conditional_log_density(const ConditionalFlow& t, const DenseArray& x, const DenseArray& y) {
  return t.log_density(Matrix(x.as_vector()), Matrix(y.as_vector()))(0);
}

}  // namespace cnf
