// cnf: command-line driver for the two-step experiments.
//
//   cnf train-supervised   --config c.txt --out DIR
//   cnf train-unsupervised --init warm --config c.txt --out DIR [--index K] [--checkpoint T.cnf]
//   cnf compare            --out DIR
//   cnf report             --out DIR
//   cnf run                --config c.txt --out DIR      (all of the above)
//
// Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 I/O error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "cnf/harness/experiment.hpp"

namespace fs = std::filesystem;
using namespace cnf;
using namespace cnf::harness;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

ExperimentConfig load(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

std::vector<fs::path> run_dirs(const fs::path& out) {
  std::vector<fs::path> dirs;
  const auto root = out / "unsupervised";
  if (!fs::exists(root)) return dirs;
  for (const auto& mode : fs::directory_iterator(root))
    if (mode.is_directory())
      for (const auto& seed : fs::directory_iterator(mode.path()))
        if (fs::exists(seed.path() / "trace.csv")) dirs.push_back(seed.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

void print_speedup(const SpeedupReport& rep) {
  for (const auto& [mode, r] : rep.median_ratio) std::printf("median ratio %s/scratch: %.4g\n", mode.c_str(), r);
  for (const auto& [mode, n] : rep.reached) std::printf("%s reached the scratch threshold in %zu run(s)\n", mode.c_str(), n);
}

int cmd_train_supervised(const Globals& g) {
  const auto cfg = load(g);
  auto r = run_supervised(cfg, g.out);
  std::printf("supervised: %zu iterations, checkpoint %s\n", r.trace.values.size(), r.checkpoint_hash.c_str());
  for (std::size_t k = 0; k < r.heldout.size(); ++k)
    std::printf("  held-out %zu: mean error %.4f, cov error %.4f\n", k, r.heldout[k].mean, r.heldout[k].cov);
  return 0;
}

int cmd_train_unsupervised(const Globals& g, const std::string& init, std::optional<std::size_t> index,
                           std::string checkpoint) {
  const auto cfg = load(g);
  write_config_copy(cfg, g.out);
  if (checkpoint.empty()) checkpoint = (fs::path(g.out) / "supervised" / "checkpoint.cnf").string();
  auto t = std::make_shared<const ConditionalFlow>(load_conditional(checkpoint, cfg.x_dim(), cfg.y_dim()));
  std::vector<std::size_t> seeds = index ? std::vector<std::size_t>{*index} : cfg.seeds;
  for (auto k : seeds) {
    auto r = run_unsupervised(cfg, t, init, k, g.out);
    std::printf("%s seed %zu: final loss %.4f, checkpoint %s", init.c_str(), k, r.final_smoothed, r.checkpoint_hash.c_str());
    if (r.errors) std::printf(", mean error %.4f, cov error %.4f", r.errors->mean, r.errors->cov);
    if (r.psnr_db) std::printf(", psnr %.2f dB", *r.psnr_db);
    std::printf("\n");
  }
  return 0;
}

int cmd_compare(const Globals& g) {
  std::size_t window = 100;
  if (!g.config.empty()) window = load(g).window;
  std::vector<LossTrace> traces;
  for (const auto& d : run_dirs(g.out))
    for (auto& t : parse_trace_csv(read_file((d / "trace.csv").string()))) traces.push_back(std::move(t));
  if (traces.empty()) throw ConfigError("no unsupervised traces under '" + g.out + "'");
  auto rep = compare_speedup(traces, window);
  write_file((fs::path(g.out) / "losses.csv").string(), trace_csv(traces));
  write_file((fs::path(g.out) / "losses.svg").string(), traces_svg(traces, "unsupervised training loss"));
  write_file((fs::path(g.out) / "speedup.csv").string(), speedup_csv(rep));
  print_speedup(rep);
  return 0;
}

int cmd_report(const Globals& g) {
  std::string s;
  const auto sup = fs::path(g.out) / "supervised" / "checkpoint.cnf";
  if (fs::exists(sup)) s += "supervised checkpoint = " + content_hash(read_file(sup.string())) + "\n";
  for (const auto& d : run_dirs(g.out)) {
    s += "\n[" + fs::relative(d, g.out).string() + "]\n";
    if (fs::exists(d / "summary.txt"))
      s += read_file((d / "summary.txt").string());
    else if (fs::exists(d / "checkpoint.cnf"))
      s += "checkpoint = " + content_hash(read_file((d / "checkpoint.cnf").string())) + "\n";
  }
  if (fs::exists(fs::path(g.out) / "speedup.csv")) s += "\n" + read_file((fs::path(g.out) / "speedup.csv").string());
  if (s.empty()) throw ConfigError("nothing to report under '" + g.out + "'");
  write_file((fs::path(g.out) / "report.txt").string(), s);
  std::cout << s;
  return 0;
}

int cmd_run(const Globals& g) {
  const auto cfg = load(g);
  auto res = run_experiment(cfg, g.out);
  std::cout << report_text(cfg, res);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional normalizing flows: supervised pretraining and warm-started posterior inference"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment config file (key = value lines)");
  app.add_option("--seed", g.seed, "Base seed, overrides the config");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  auto* sup = app.add_subcommand("train-supervised", "Train the conditional flow on paired data");
  auto* unsup = app.add_subcommand("train-unsupervised", "Train a posterior generator for new observations");
  std::string init;
  std::optional<std::size_t> index;
  std::string checkpoint;
  unsup->add_option("--init", init, "Initialization")->required()->check(CLI::IsMember({"scratch", "warm", "precond"}));
  unsup->add_option("--index", index, "Single seed index (default: every seed in the config)");
  unsup->add_option("--checkpoint", checkpoint, "Supervised checkpoint (default: OUT/supervised/checkpoint.cnf)");
  auto* cmp = app.add_subcommand("compare", "Iterations-to-threshold comparison of the stored traces");
  auto* rep = app.add_subcommand("report", "Summarize checkpoints and runs in the output directory");
  auto* run = app.add_subcommand("run", "Supervised phase, every (mode, seed) run, and the comparison");
  for (auto* sc : {sup, unsup, cmp, rep, run}) sc->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;  // help requests exit 0
  }

  try {
    if (*sup) return cmd_train_supervised(g);
    if (*unsup) return cmd_train_unsupervised(g, init, index, checkpoint);
    if (*cmp) return cmd_compare(g);
    if (*rep) return cmd_report(g);
    return cmd_run(g);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    // std::stoull and friends from malformed CSV input
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  }
}
