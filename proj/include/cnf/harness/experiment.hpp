#pragma once

// The two-step scheme end to end: train T on paired data, then train S per
// new observation under each init mode and compare.
//
// Every random stream is derived from cfg.seed with a named tag, so a run is
// a pure function of the config. When `out` is nonempty each step writes its
// artifacts under it:
//
//   out/config.txt
//   out/supervised/{checkpoint.cnf, trace.csv, loss.svg, heldout.csv}
//   out/unsupervised/<mode>/seed<k>/{checkpoint.cnf, trace.csv, mean.csv, std.csv, summary.txt, ...}
//   out/{losses.csv, losses.svg, speedup.csv, report.txt}

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cnf/harness/checkpoint.hpp"
#include "cnf/harness/config.hpp"
#include "cnf/harness/report.hpp"
#include "cnf/harness/speedup.hpp"
#include "cnf/problems.hpp"
#include "cnf/transfer.hpp"

namespace cnf::harness {

namespace fs = std::filesystem;

inline constexpr std::size_t kHeldOut = 5;

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory '" + p.string() + "': " + ec.message());
}

inline void write_config_copy(const ExperimentConfig& cfg, const std::string& out) {
  if (out.empty()) return;
  ensure_dir(out);
  write_file((fs::path(out) / "config.txt").string(), serialize_config(cfg));
}

// ---------------------------------------------------------------------------
// Problems

inline LinearGaussianProblem gaussian_problem(const ExperimentConfig& cfg) {
  return make_supervised_gaussian(cfg.problem_seed, cfg.nx, cfg.ny);
}

inline ImageProblems image_problems(const ExperimentConfig& cfg) {
  return make_image_problems(cfg.image_side, cfg.problem_seed, cfg.sensing_rate);
}

inline JointBatch training_corpus(const ExperimentConfig& cfg) {
  const auto seed = derive_seed(cfg.seed, "corpus");
  if (cfg.problem == ProblemKind::gaussian) {
    const auto p = gaussian_problem(cfg);
    return sample_joint(p, prior_law(p), cfg.pairs, seed);
  }
  return sample_image_corpus(image_problems(cfg), cfg.pairs, seed);
}

/// Likelihood of the unsupervised problem. For the Gaussian problem the prior
/// fields are the (unchanged) prior used by the analytic target.
inline LinearGaussianProblem inference_problem(const ExperimentConfig& cfg) {
  if (cfg.problem == ProblemKind::gaussian) return make_shifted_problem(gaussian_problem(cfg)).problem;
  return image_problems(cfg).unsupervised.likelihood();
}

struct Observation {
  Vector x_true;
  Vector y;
};

/// New observation y' for one seed index; x' comes from the shifted law
/// (Gaussian) or the held-out test images (image).
inline Observation make_observation(const ExperimentConfig& cfg, std::size_t index) {
  const auto seed = derive_seed(cfg.seed, "observation", index);
  if (cfg.problem == ProblemKind::gaussian) {
    const auto sp = make_shifted_problem(gaussian_problem(cfg));
    auto b = sample_joint(sp.problem, sp.data_law, 1, seed);
    return {b.x.col(0), b.y.col(0)};
  }
  const auto probs = image_problems(cfg);
  Observation o;
  o.x_true = probs.test_image(index);
  Rng rng(seed);
  o.y = probs.unsupervised.observe(o.x_true, rng);
  return o;
}

inline LogPosteriorTarget make_target(const ExperimentConfig& cfg, std::shared_ptr<const ConditionalFlow> t,
                                      const Observation& obs) {
  const auto p = inference_problem(cfg);
  if (cfg.problem == ProblemKind::gaussian) return make_log_posterior(p, AnalyticGaussianPrior{p.prior_mean, p.prior_cov}, obs.y);
  return make_log_posterior(p, FlowPosteriorPrior{std::move(t), obs.y}, obs.y);
}

// ---------------------------------------------------------------------------
// Supervised

struct SupervisedResult {
  ConditionalFlow flow;
  LossTrace trace;
  std::string checkpoint_hash;
  std::vector<MomentErrors> heldout;  // Gaussian problem only
};

inline ConditionalFlow initial_flow(const ExperimentConfig& cfg, const JointBatch& corpus) {
  auto t = ConditionalFlow::create(
      {cfg.x_dim(), cfg.y_dim(), cfg.layers, cfg.hidden, cfg.clamp, derive_seed(cfg.seed, "supervised-init")});
  if (cfg.standardize) t.standardize_from(corpus.x, corpus.y);
  return t;
}

/// Conditional-sample moments at fresh y drawn from the supervised joint law,
/// against the analytic posterior.
inline std::vector<MomentErrors> heldout_errors(const ExperimentConfig& cfg, const ConditionalFlow& t) {
  const auto p = gaussian_problem(cfg);
  const auto held = sample_joint(p, prior_law(p), kHeldOut, derive_seed(cfg.seed, "held-out"));
  std::vector<MomentErrors> out;
  for (std::size_t k = 0; k < kHeldOut; ++k) {
    const Vector y = held.y.col(static_cast<Eigen::Index>(k));
    Rng rng(derive_seed(cfg.seed, "held-out-draws", k));
    const Matrix z = standard_normal(static_cast<Eigen::Index>(cfg.nx), static_cast<Eigen::Index>(cfg.samples), rng);
    const auto post = analytic_posterior(p, y);
    out.push_back(moment_errors(posterior_stats(t.sample(Matrix(y), z)), post.mean, post.cov));
  }
  return out;
}

inline SupervisedResult run_supervised(const ExperimentConfig& cfg, const std::string& out = "") {
  cfg.validate();
  write_config_copy(cfg, out);
  const auto corpus = training_corpus(cfg);
  SupervisedResult r{initial_flow(cfg, corpus), {}, {}, {}};
  r.trace = train(r.flow, corpus,
                  cfg.supervised.train_config(Objective::forward_kl, derive_seed(cfg.seed, "supervised"), "supervised"));
  const std::string bytes = encode_checkpoint(r.flow);
  r.checkpoint_hash = content_hash(bytes);
  if (!out.empty()) {
    const auto dir = fs::path(out) / "supervised";
    ensure_dir(dir);
    write_file((dir / "checkpoint.cnf").string(), bytes);
    write_file((dir / "trace.csv").string(), trace_csv(r.trace));
    write_file((dir / "loss.svg").string(), traces_svg({r.trace}, "supervised training loss"));
  }
  if (r.trace.aborted) throw NumericError("supervised training aborted: " + r.trace.abort_reason);
  if (cfg.problem == ProblemKind::gaussian) {
    r.heldout = heldout_errors(cfg, r.flow);
    if (!out.empty()) {
      std::string csv = "index,mean_rel_error,cov_rel_error\n";
      for (std::size_t k = 0; k < r.heldout.size(); ++k)
        csv += std::to_string(k) + "," + detail::g17(r.heldout[k].mean) + "," + detail::g17(r.heldout[k].cov) + "\n";
      write_file((fs::path(out) / "supervised" / "heldout.csv").string(), csv);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Unsupervised

struct UnsupervisedResult {
  std::string mode;
  std::size_t seed_index = 0;
  Observation observation;
  LossTrace trace;
  PosteriorSamples samples;
  std::string checkpoint_hash;
  double final_smoothed = 0.0;   // NaN when the trace is shorter than the window
  // Gaussian problem
  std::optional<MomentErrors> errors;
  std::optional<double> neg_log_evidence;
  // Image problem
  std::optional<double> psnr_db;
};

namespace detail {

template <Generator G>
Matrix draw(const G& s, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return s.generate(standard_normal(static_cast<Eigen::Index>(s.dim()), static_cast<Eigen::Index>(n), rng)).value;
}

}  // namespace detail

/// Trains S for one (mode, seed index). The training stream, the fresh
/// initializations and the posterior draws each get their own derived seed.
inline UnsupervisedResult run_unsupervised(const ExperimentConfig& cfg, std::shared_ptr<const ConditionalFlow> t,
                                           const std::string& mode, std::size_t index, const std::string& out = "") {
  cfg.validate();
  if (!t) throw ConfigError("unsupervised run needs a trained conditional flow");
  if (t->nx() != cfg.x_dim() || t->ny() != cfg.y_dim())
    throw CheckpointError(CheckpointError::Kind::dim_mismatch, "conditional flow does not match the config dimensions");
  UnsupervisedResult r;
  r.mode = mode;
  r.seed_index = index;
  r.observation = make_observation(cfg, index);
  const auto target = make_target(cfg, t, r.observation);
  const auto tc = cfg.unsupervised.train_config(Objective::reverse_kl, derive_seed(cfg.seed, "unsupervised:" + mode, index), mode);
  const auto draw_seed = derive_seed(cfg.seed, "draws:" + mode, index);

  std::string bytes;
  Matrix x;
  auto fit = [&](auto s) {
    r.trace = train(s, target, tc);
    bytes = encode_checkpoint(s);
    if (!r.trace.aborted) x = detail::draw(s, cfg.samples, draw_seed);
  };
  if (mode == "warm")
    fit(warm_start(*t, r.observation.y));
  else if (mode == "scratch")
    fit(scratch_baseline(t->flow_x.config(), r.observation.y, derive_seed(cfg.seed, "scratch-init", index)));
  else if (mode == "precond")
    fit(make_preconditioned(*t, r.observation.y, cfg.outer_config(derive_seed(cfg.seed, "outer-init", index))));
  else
    throw ConfigError("unknown init mode '" + mode + "'");
  r.trace.seed = index;
  r.checkpoint_hash = content_hash(bytes);

  fs::path dir;
  if (!out.empty()) {
    dir = fs::path(out) / "unsupervised" / mode / ("seed" + std::to_string(index));
    ensure_dir(dir);
    write_file((dir / "checkpoint.cnf").string(), bytes);
    write_file((dir / "trace.csv").string(), trace_csv(r.trace));
  }
  if (r.trace.aborted) throw NumericError(mode + " run, seed " + std::to_string(index) + ": " + r.trace.abort_reason);

  r.final_smoothed = r.trace.values.size() >= cfg.window ? smooth(r.trace.values, cfg.window).back() : NAN;
  r.samples = posterior_stats(std::move(x));
  std::string summary = "mode = " + mode + "\nseed = " + std::to_string(index) + "\ncheckpoint = " + r.checkpoint_hash +
                        "\nfinal_smoothed_loss = " + detail::g17(r.final_smoothed) + "\n";
  if (cfg.problem == ProblemKind::gaussian) {
    const auto p = inference_problem(cfg);
    const auto post = analytic_posterior(p, r.observation.y);
    r.errors = moment_errors(r.samples, post.mean, post.cov);
    r.neg_log_evidence = -log_evidence(p, r.observation.y);
    summary += "mean_rel_error = " + detail::g17(r.errors->mean) + "\ncov_rel_error = " + detail::g17(r.errors->cov) +
               "\nneg_log_evidence = " + detail::g17(*r.neg_log_evidence) + "\n";
  } else {
    r.psnr_db = psnr(r.samples.mean, r.observation.x_true);
    summary += "psnr_db = " + detail::g17(*r.psnr_db) + "\n";
  }
  if (!out.empty()) {
    write_file((dir / "summary.txt").string(), summary);
    write_file((dir / "mean.csv").string(), matrix_csv(r.samples.mean));
    write_file((dir / "std.csv").string(), matrix_csv(r.samples.std));
    if (r.samples.cov) write_file((dir / "cov.csv").string(), matrix_csv(*r.samples.cov));
    if (cfg.problem == ProblemKind::image) {
      const auto side = cfg.image_side;
      write_file((dir / "mean.svg").string(), raster_svg(as_image(r.samples.mean, side), mode + " conditional mean"));
      write_file((dir / "std.svg").string(), raster_svg(as_image(r.samples.std, side), mode + " pointwise std"));
      write_file((dir / "truth.svg").string(), raster_svg(as_image(r.observation.x_true, side), "ground truth"));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Full experiment

struct ExperimentResult {
  SupervisedResult supervised;
  std::vector<UnsupervisedResult> runs;  // seed-major, modes in config order
  std::optional<SpeedupReport> speedup;  // when scratch and warm both ran

  const UnsupervisedResult& run(const std::string& mode, std::size_t index) const {
    for (const auto& r : runs)
      if (r.mode == mode && r.seed_index == index) return r;
    throw ConfigError("no run for mode '" + mode + "' seed " + std::to_string(index));
  }
};

inline std::string report_text(const ExperimentConfig& cfg, const ExperimentResult& res) {
  std::string s = "supervised checkpoint = " + res.supervised.checkpoint_hash + "\n";
  for (std::size_t k = 0; k < res.supervised.heldout.size(); ++k)
    s += "heldout " + std::to_string(k) + ": mean error " + detail::g4(res.supervised.heldout[k].mean) +
         ", cov error " + detail::g4(res.supervised.heldout[k].cov) + "\n";
  for (const auto& r : res.runs) {
    s += r.mode + " seed " + std::to_string(r.seed_index) + ": checkpoint " + r.checkpoint_hash + ", final loss " +
         detail::g4(r.final_smoothed);
    if (r.errors) s += ", mean error " + detail::g4(r.errors->mean) + ", cov error " + detail::g4(r.errors->cov);
    if (r.neg_log_evidence) s += ", -log Z + H = " + detail::g4(*r.neg_log_evidence + standard_normal_entropy(cfg.x_dim()));
    if (r.psnr_db) s += ", psnr " + detail::g4(*r.psnr_db) + " dB";
    s += "\n";
  }
  if (res.speedup)
    for (const auto& [mode, ratio] : res.speedup->median_ratio)
      s += "median iters-to-threshold ratio " + mode + "/scratch = " + detail::g4(ratio) + "\n";
  return s;
}

inline void write_comparison(const ExperimentConfig& cfg, const std::vector<LossTrace>& traces,
                             const std::optional<SpeedupReport>& rep, const std::string& out) {
  if (out.empty()) return;
  write_file((fs::path(out) / "losses.csv").string(), trace_csv(traces));
  write_file((fs::path(out) / "losses.svg").string(), traces_svg(traces, "unsupervised training loss"));
  if (rep) write_file((fs::path(out) / "speedup.csv").string(), speedup_csv(*rep));
  (void)cfg;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out = "") {
  cfg.validate();
  ExperimentResult res;
  res.supervised = run_supervised(cfg, out);
  auto t = std::make_shared<const ConditionalFlow>(res.supervised.flow);
  std::vector<LossTrace> traces;
  for (auto index : cfg.seeds)
    for (const auto& mode : cfg.modes) {
      res.runs.push_back(run_unsupervised(cfg, t, mode, index, out));
      traces.push_back(res.runs.back().trace);
    }
  const bool comparable = std::find(cfg.modes.begin(), cfg.modes.end(), "scratch") != cfg.modes.end() &&
                          std::find(cfg.modes.begin(), cfg.modes.end(), "warm") != cfg.modes.end();
  if (comparable) res.speedup = compare_speedup(traces, cfg.window);
  write_comparison(cfg, traces, res.speedup, out);
  if (!out.empty()) write_file((fs::path(out) / "report.txt").string(), report_text(cfg, res));
  return res;
}

}  // namespace cnf::harness
