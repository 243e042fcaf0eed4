#pragma once

// Dense numerical kernel: arrays, flat parameter storage with gradient
// buffers, and tanh MLPs with hand-written reverse mode.
//
// Batched quantities are Eigen matrices with one sample per column.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cnf/errors.hpp"
#include "cnf/random.hpp"

namespace cnf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

template <class Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, std::string_view context) {
  if (!all_finite(m)) throw NumericError("non-finite values in " + std::string(context));
}

// ---------------------------------------------------------------------------
// DenseArray

class DenseArray {
 public:
  DenseArray() = default;

  DenseArray(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.empty()) throw DimensionError("DenseArray needs at least one extent");
    for (auto e : shape_)
      if (e == 0) throw DimensionError("DenseArray extents must be positive");
    if (data_.size() != extent_product(shape_))
      throw DimensionError("DenseArray data length " + std::to_string(data_.size()) +
                           " does not match shape product " + std::to_string(extent_product(shape_)));
  }

  static DenseArray zeros(std::vector<std::size_t> shape) {
    auto n = extent_product(shape);
    return DenseArray(std::move(shape), std::vector<double>(n, 0.0));
  }

  static DenseArray from_vector(const Vector& v) {
    return DenseArray({static_cast<std::size_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
  }

  static DenseArray from_values(std::initializer_list<double> values) {
    return DenseArray({values.size()}, std::vector<double>(values));
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  Eigen::Map<const Vector> as_vector() const {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }
  Vector to_vector() const { return as_vector(); }

  bool finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }
  void require_finite(std::string_view context) const {
    if (!finite()) throw NumericError("non-finite values in " + std::string(context));
  }

  friend bool operator==(const DenseArray&, const DenseArray&) = default;

  static std::size_t extent_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// ParamStore
//
// Named arrays live in one contiguous value buffer with an index-aligned
// gradient buffer of the same layout. Entry order is insertion order.

class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
  };

  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Entry e{std::move(name), std::move(shape), values_.size(), 0};
    e.size = DenseArray::extent_product(e.shape);
    values_.resize(values_.size() + e.size, 0.0);
    grads_.resize(values_.size(), 0.0);
    entries_.push_back(std::move(e));
    return entries_.size() - 1;
  }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t entry_count() const noexcept { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> grads() noexcept { return grads_; }
  std::span<const double> grads() const noexcept { return grads_; }

  DenseArray value(std::size_t i) const { return slice(values_, i); }
  DenseArray grad(std::size_t i) const { return slice(grads_, i); }

  void set_value(std::size_t i, const DenseArray& v) {
    const auto& e = entry(i);
    if (v.shape() != e.shape) throw DimensionError("shape mismatch assigning parameter '" + e.name + "'");
    std::copy(v.data().begin(), v.data().end(), values_.begin() + static_cast<std::ptrdiff_t>(e.offset));
  }

  void zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || a.entries_[i].shape != b.entries_[i].shape) return false;
    return a.values_ == b.values_;
  }

 private:
  // Eigen's vectorized reductions peel differently by base address, so both
  // buffers are over-aligned to keep results bitwise reproducible.
  using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

  DenseArray slice(const Buffer& buf, std::size_t i) const {
    const auto& e = entry(i);
    auto first = buf.begin() + static_cast<std::ptrdiff_t>(e.offset);
    return DenseArray(e.shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(e.size)));
  }

  std::vector<Entry> entries_;
  Buffer values_;
  Buffer grads_;
};

// ---------------------------------------------------------------------------
// MLP

enum class Activation { tanh };

struct MlpSpec {
  std::size_t in_dim = 0;
  std::vector<std::size_t> hidden_widths;
  std::size_t out_dim = 0;
  Activation activation = Activation::tanh;

  std::size_t layer_count() const noexcept { return hidden_widths.size() + 1; }
  std::size_t layer_in(std::size_t k) const { return k == 0 ? in_dim : hidden_widths[k - 1]; }
  std::size_t layer_out(std::size_t k) const { return k + 1 == layer_count() ? out_dim : hidden_widths[k]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < layer_count(); ++k) n += layer_out(k) * (layer_in(k) + 1);
    return n;
  }

  void validate() const {
    if (in_dim == 0) throw ConfigError("MLP input width must be positive");
    if (hidden_widths.empty()) throw ConfigError("MLP needs at least one hidden layer");
    for (auto w : hidden_widths)
      if (w == 0) throw ConfigError("MLP hidden widths must be positive");
    if (out_dim == 0 || out_dim % 2 != 0) throw ConfigError("MLP output width must be positive and even");
  }

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Registers weight `w<k>` (out x in) and bias `b<k>` per layer; returns the
/// index of the first entry. Values start at zero.
inline std::size_t register_mlp(ParamStore& store, const MlpSpec& spec, std::string_view prefix) {
  spec.validate();
  std::size_t first = store.entry_count();
  for (std::size_t k = 0; k < spec.layer_count(); ++k) {
    store.add(std::string(prefix) + ".w" + std::to_string(k), {spec.layer_out(k), spec.layer_in(k)});
    store.add(std::string(prefix) + ".b" + std::to_string(k), {spec.layer_out(k)});
  }
  return first;
}

/// Glorot-uniform weights, zero biases. With zero_last the final affine layer
/// is all zeros so the network outputs exactly 0.
inline void init_mlp(ParamStore& store, const MlpSpec& spec, std::size_t first, Rng& rng, bool zero_last) {
  auto values = store.values();
  for (std::size_t k = 0; k < spec.layer_count(); ++k) {
    const auto& w = store.entry(first + 2 * k);
    const auto& b = store.entry(first + 2 * k + 1);
    bool last = k + 1 == spec.layer_count();
    double s = std::sqrt(6.0 / static_cast<double>(spec.layer_in(k) + spec.layer_out(k)));
    std::uniform_real_distribution<double> uni(-s, s);
    for (std::size_t i = 0; i < w.size; ++i) values[w.offset + i] = (last && zero_last) ? 0.0 : uni(rng);
    std::fill_n(values.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size, 0.0);
  }
}

namespace detail {

inline Eigen::Map<const RowMatrix> weight(const ParamStore& store, std::size_t idx, const MlpSpec& spec,
                                          std::size_t k) {
  const auto& e = store.entry(idx);
  if (e.shape.size() != 2 || e.shape[0] != spec.layer_out(k) || e.shape[1] != spec.layer_in(k))
    throw DimensionError("weight '" + e.name + "' has the wrong shape", static_cast<std::ptrdiff_t>(k));
  return {store.values().data() + e.offset, static_cast<Eigen::Index>(e.shape[0]),
          static_cast<Eigen::Index>(e.shape[1])};
}

inline Eigen::Map<const Vector> bias(const ParamStore& store, std::size_t idx, const MlpSpec& spec, std::size_t k) {
  const auto& e = store.entry(idx);
  if (e.shape.size() != 1 || e.shape[0] != spec.layer_out(k))
    throw DimensionError("bias '" + e.name + "' has the wrong shape", static_cast<std::ptrdiff_t>(k));
  return {store.values().data() + e.offset, static_cast<Eigen::Index>(e.size)};
}

}  // namespace detail

/// Layer inputs recorded by a forward pass; activations[k] feeds layer k.
struct MlpTape {
  std::vector<Matrix> activations;
};

inline Matrix mlp_forward(const MlpSpec& spec, const ParamStore& params, std::size_t first, const Matrix& input,
                          MlpTape* tape = nullptr) {
  if (static_cast<std::size_t>(input.rows()) != spec.in_dim)
    throw DimensionError("MLP input has " + std::to_string(input.rows()) + " rows, expected " +
                             std::to_string(spec.in_dim),
                         0);
  if (first + 2 * spec.layer_count() > params.entry_count())
    throw DimensionError("parameter store is missing MLP layers");
  if (tape) tape->activations.assign(1, input);
  Matrix h = input;
  for (std::size_t k = 0; k < spec.layer_count(); ++k) {
    auto w = detail::weight(params, first + 2 * k, spec, k);
    auto b = detail::bias(params, first + 2 * k + 1, spec, k);
    Matrix pre = w * h;
    pre.colwise() += b;
    if (k + 1 == spec.layer_count()) return pre;
    h = pre.array().tanh().matrix();
    if (tape) tape->activations.push_back(h);
  }
  return h;  // unreachable: layer_count() >= 2
}

/// Reverse pass for a recorded forward. Parameter gradients are added into
/// `grads` (same layout as params.values()); an empty span skips them.
/// Returns the gradient with respect to the network input.
inline Matrix mlp_backward(const MlpSpec& spec, const ParamStore& params, std::size_t first, const MlpTape& tape,
                           const Matrix& out_grad, std::span<double> grads) {
  if (static_cast<std::size_t>(out_grad.rows()) != spec.out_dim)
    throw DimensionError("MLP output cotangent has the wrong size", static_cast<std::ptrdiff_t>(spec.layer_count() - 1));
  if (tape.activations.size() != spec.layer_count())
    throw DimensionError("MLP tape does not match the network depth");
  const bool accumulate = !grads.empty();
  if (accumulate && grads.size() != params.size()) throw DimensionError("gradient buffer size mismatch");

  Matrix g = out_grad;
  for (std::size_t k = spec.layer_count(); k-- > 0;) {
    const Matrix& a = tape.activations[k];
    if (a.cols() != g.cols()) throw DimensionError("batch size mismatch in MLP backward", static_cast<std::ptrdiff_t>(k));
    auto w = detail::weight(params, first + 2 * k, spec, k);
    if (accumulate) {
      const auto& we = params.entry(first + 2 * k);
      const auto& be = params.entry(first + 2 * k + 1);
      Eigen::Map<RowMatrix> gw(grads.data() + we.offset, w.rows(), w.cols());
      Eigen::Map<Vector> gb(grads.data() + be.offset, w.rows());
      gw.noalias() += g * a.transpose();
      gb += g.rowwise().sum();
    }
    Matrix prev = w.transpose() * g;
    if (k > 0) prev.array() *= 1.0 - a.array().square();
    g = std::move(prev);
  }
  return g;
}

// Single-sample conveniences.

inline DenseArray mlp_forward(const MlpSpec& spec, const ParamStore& params, std::size_t first,
                              const DenseArray& input) {
  return DenseArray::from_vector(mlp_forward(spec, params, first, Matrix(input.as_vector()), nullptr).col(0));
}

/// Accumulates into params.grads() and returns the input gradient.
inline DenseArray mlp_backward(const MlpSpec& spec, ParamStore& params, std::size_t first, const DenseArray& input,
                               const DenseArray& out_grad) {
  MlpTape tape;
  mlp_forward(spec, params, first, Matrix(input.as_vector()), &tape);
  Matrix g = mlp_backward(spec, params, first, tape, Matrix(out_grad.as_vector()), params.grads());
  return DenseArray::from_vector(g.col(0));
}

// ---------------------------------------------------------------------------
// Gradient check

/// Evaluates the loss and accumulates its gradient into params.grads().
using LossFn = std::function<double(ParamStore&)>;

/// Max over all scalars of |analytic - central FD| / max(|analytic|, |FD|, 1e-12).
inline double grad_check(const LossFn& loss_fn, ParamStore& params, double step) {
  if (!(step > 0.0)) throw ConfigError("finite-difference step must be positive");
  params.zero_grads();
  double base = loss_fn(params);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");
  std::vector<double> analytic(params.grads().begin(), params.grads().end());

  auto values = params.values();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    params.zero_grads();
    double up = loss_fn(params);
    values[i] = saved - step;
    params.zero_grads();
    double down = loss_fn(params);
    values[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss");
    double fd = (up - down) / (2.0 * step);
    double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-12});
    worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
  }
  std::copy(analytic.begin(), analytic.end(), params.grads().begin());
  return worst;
}

}  // namespace cnf
