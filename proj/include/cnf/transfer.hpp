#pragma once

// Reusing a trained conditional flow T for a new observation y'.
//
//   warm start:      S_0(z) = T_x^{-1}(z; y'), all parameters trainable
//   preconditioned:  S(z)   = Sbar(T_x^{-1}(z; y')), only Sbar trainable
//
// Both bind z_y = T_y(y'); by the triangular structure the x-component of
// T^{-1}(z_x, T_y(y')) only depends on y' through T_x's condition input.

#include <memory>
#include <utility>

#include "cnf/flows.hpp"
#include "cnf/objectives.hpp"

namespace cnf {

/// A flow on X whose condition input is pinned to one observation and which
/// generates in the inverse direction: x = flow^{-1}(z; cond).
class PinnedFlow {
 public:
  using Tape = FlowTape;

  PinnedFlow() = default;
  PinnedFlow(Flow flow, Vector cond) : flow_(std::move(flow)), cond_(std::move(cond)) {
    if (static_cast<std::size_t>(cond_.size()) != flow_.cond_dim())
      throw ConfigError("pinned condition has the wrong dimension");
  }

  std::size_t dim() const noexcept { return flow_.dim(); }
  const Vector& cond() const noexcept { return cond_; }
  const Flow& flow() const noexcept { return flow_; }
  Flow& flow() noexcept { return flow_; }
  ParamStore& params() noexcept { return flow_.params(); }
  const ParamStore& params() const noexcept { return flow_.params(); }

  FlowResult generate(const Matrix& z, Tape* tape = nullptr) const { return flow_.inverse(z, Matrix(cond_), tape); }
  void backward(const Tape& tape, const Matrix& g_x, const Vector& g_logdet) {
    flow_.backward(tape, g_x, g_logdet, flow_.params().grads());
  }
  /// x -> z.
  FlowResult invert(const Matrix& x) const { return flow_.forward(x, Matrix(cond_)); }

 private:
  Flow flow_;
  Vector cond_;
};

using WarmStartedFlow = PinnedFlow;

inline void check_observation(const ConditionalFlow& t, const Vector& y_obs) {
  if (static_cast<std::size_t>(y_obs.size()) != t.ny())
    throw ConfigError("observation has " + std::to_string(y_obs.size()) + " entries, flow expects " +
                      std::to_string(t.ny()));
}

/// Deep copy of T_x pinned at y'; T itself is untouched by later training.
inline WarmStartedFlow warm_start(const ConditionalFlow& t, const Vector& y_obs) {
  check_observation(t, y_obs);
  return PinnedFlow(t.flow_x, y_obs);
}

/// Same architecture as warm_start (including the pinned condition) with a
/// fresh initialization.
inline PinnedFlow scratch_baseline(const FlowConfig& arch, const Vector& y_obs, std::uint64_t seed) {
  FlowConfig cfg = arch;
  cfg.seed = seed;
  if (static_cast<std::size_t>(y_obs.size()) != cfg.cond_dim) throw ConfigError("observation does not match the architecture");
  return PinnedFlow(Flow::create(cfg), y_obs);
}

/// Frozen T_x^{-1}(.; y') followed by a trainable unconditional flow Sbar.
class PreconditionedFlow {
 public:
  struct Tape {
    FlowTape outer;
  };

  PreconditionedFlow() = default;
  PreconditionedFlow(std::shared_ptr<const Flow> frozen, Vector cond, Flow outer)
      : frozen_(std::move(frozen)), cond_(std::move(cond)), outer_(std::move(outer)) {
    if (!frozen_) throw ConfigError("preconditioned flow needs a frozen stage");
    if (static_cast<std::size_t>(cond_.size()) != frozen_->cond_dim())
      throw ConfigError("pinned condition has the wrong dimension");
    if (outer_.dim() != frozen_->dim() || outer_.cond_dim() != 0)
      throw ConfigError("outer flow must be unconditional on the same space as the frozen stage");
  }

  std::size_t dim() const noexcept { return outer_.dim(); }
  const Flow& frozen() const noexcept { return *frozen_; }
  std::shared_ptr<const Flow> frozen_ptr() const noexcept { return frozen_; }
  const Vector& cond() const noexcept { return cond_; }
  const Flow& outer() const noexcept { return outer_; }
  Flow& outer() noexcept { return outer_; }
  ParamStore& params() noexcept { return outer_.params(); }
  const ParamStore& params() const noexcept { return outer_.params(); }

  FlowResult generate(const Matrix& z, Tape* tape = nullptr) const {
    auto inner = frozen_->inverse(z, Matrix(cond_));
    auto out = outer_.forward(inner.value, Matrix(0, z.cols()), tape ? &tape->outer : nullptr);
    return {std::move(out.value), inner.logdet + out.logdet};
  }

  // The frozen stage has no trainable parameters and z needs no gradient, so
  // the reverse pass stops at the outer flow.
  void backward(const Tape& tape, const Matrix& g_x, const Vector& g_logdet) {
    outer_.backward(tape.outer, g_x, g_logdet, outer_.params().grads());
  }

  /// x -> z.
  FlowResult invert(const Matrix& x) const {
    auto u = outer_.inverse(x, Matrix(0, x.cols()));
    auto z = frozen_->forward(u.value, Matrix(cond_));
    return {std::move(z.value), u.logdet + z.logdet};
  }

 private:
  std::shared_ptr<const Flow> frozen_;
  Vector cond_;
  Flow outer_;
};

inline PreconditionedFlow make_preconditioned(const ConditionalFlow& t, const Vector& y_obs, const FlowConfig& outer) {
  check_observation(t, y_obs);
  if (outer.dim != t.nx() || outer.cond_dim != 0)
    throw ConfigError("outer flow must be unconditional with dimension " + std::to_string(t.nx()));
  // A closed outer flow starts as the exact identity, so the composite starts
  // exactly at the warm start.
  FlowConfig cfg = outer;
  cfg.closed = true;
  return PreconditionedFlow(std::make_shared<const Flow>(t.flow_x), y_obs, Flow::create(cfg));
}

/// Full joint inverse (x, y) = T^{-1}(z_x, z_y).
inline std::pair<Matrix, Matrix> joint_inverse(const ConditionalFlow& t, const Matrix& z_x, const Matrix& z_y) {
  Matrix y = t.flow_y.inverse(z_y, Matrix(0, z_y.cols())).value;
  Matrix x = t.flow_x.inverse(z_x, y).value;
  return {std::move(x), std::move(y)};
}

/// pi_X o T^{-1}(z_x, T_y(y')) evaluated literally through the joint inverse.
inline Matrix project_joint_inverse(const ConditionalFlow& t, const Vector& y_obs, const Matrix& z_x) {
  check_observation(t, y_obs);
  Matrix z_y = t.flow_y.forward(Matrix(y_obs), Matrix(0, 1)).value;
  return joint_inverse(t, z_x, z_y.replicate(1, z_x.cols())).first;
}

static_assert(Generator<PinnedFlow>);
static_assert(Generator<PreconditionedFlow>);

}  // namespace cnf
