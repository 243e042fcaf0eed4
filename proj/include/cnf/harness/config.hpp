#pragma once

// Experiment configuration: flat `key = value` lines, `#` starts a comment,
// unknown keys are errors. Defaults depend on `problem`, so that key is read
// first wherever it appears.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cnf/errors.hpp"
#include "cnf/flows.hpp"
#include "cnf/objectives.hpp"

namespace cnf::harness {

enum class ProblemKind { gaussian, image };

struct PhaseConfig {
  std::size_t iterations = 0;
  std::size_t batch = 0;
  double lr = 1e-3;
  LrSchedule schedule = LrSchedule::constant;
  double lr_final_fraction = 0.01;
  double weight_decay = 0.0;

  TrainConfig train_config(Objective obj, std::uint64_t seed, std::string mode) const {
    TrainConfig t;
    t.objective = obj;
    t.iterations = iterations;
    t.batch_size = batch;
    t.seed = seed;
    t.adam.lr = lr;
    t.adam.weight_decay = weight_decay;
    t.schedule = schedule;
    t.lr_final_fraction = lr_final_fraction;
    t.mode = std::move(mode);
    return t;
  }
};

struct ExperimentConfig {
  ProblemKind problem = ProblemKind::gaussian;
  std::uint64_t seed = 0;          // base seed for every derived stream
  std::uint64_t problem_seed = 1;  // operator / sensing mask / corpus
  std::size_t nx = 12;
  std::size_t ny = 6;
  std::size_t image_side = 16;
  double sensing_rate = 0.3;
  std::size_t pairs = 4000;

  std::size_t layers = 4;
  std::vector<std::size_t> hidden{64};
  double clamp = 2.0;
  bool standardize = true;
  std::size_t outer_layers = 4;
  std::vector<std::size_t> outer_hidden{64};

  PhaseConfig supervised{4000, 128, 1e-3, LrSchedule::cosine, 0.01, 0.5};
  PhaseConfig unsupervised{3000, 128, 1e-3, LrSchedule::cosine, 0.1, 0.0};

  std::vector<std::string> modes{"scratch", "warm", "precond"};
  std::vector<std::size_t> seeds{1, 2, 3, 4, 5};
  std::size_t samples = 10000;
  std::size_t window = 100;

  std::size_t x_dim() const { return problem == ProblemKind::gaussian ? nx : image_side * image_side; }
  std::size_t y_dim() const { return problem == ProblemKind::gaussian ? ny : image_side * image_side; }

  FlowConfig outer_config(std::uint64_t seed_value) const {
    FlowConfig f{x_dim(), 0, outer_layers, outer_hidden, clamp, seed_value};
    f.closed = true;
    return f;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(nx, "nx");
    positive(ny, "ny");
    positive(pairs, "pairs");
    positive(supervised.batch, "sup_batch");
    positive(unsupervised.batch, "unsup_batch");
    positive(window, "window");
    if (problem == ProblemKind::image && image_side < 8) throw ConfigError("image_side must be >= 8");
    if (!(sensing_rate > 0.0 && sensing_rate <= 1.0)) throw ConfigError("sensing_rate must lie in (0, 1]");
    if (layers < 2 || layers % 2) throw ConfigError("layers must be even and >= 2");
    if (outer_layers < 2 || outer_layers % 2) throw ConfigError("outer_layers must be even and >= 2");
    if (hidden.empty() || outer_hidden.empty()) throw ConfigError("hidden widths must be nonempty");
    if (!(clamp > 0.0)) throw ConfigError("clamp must be positive");
    for (const auto* ph : {&supervised, &unsupervised}) {
      if (!(ph->lr > 0.0)) throw ConfigError("learning rates must be positive");
      if (!(ph->lr_final_fraction > 0.0 && ph->lr_final_fraction <= 1.0))
        throw ConfigError("lr_final_fraction must lie in (0, 1]");
      if (ph->weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    }
    if (modes.empty()) throw ConfigError("modes must name at least one init mode");
    for (const auto& m : modes)
      if (m != "scratch" && m != "warm" && m != "precond") throw ConfigError("unknown init mode '" + m + "'");
    if (seeds.empty()) throw ConfigError("seeds must be nonempty");
    if (samples < 2) throw ConfigError("samples must be >= 2");
  }
};

/// Defaults for the image problem (desk-scale n = 16).
inline ExperimentConfig image_defaults() {
  ExperimentConfig c;
  c.problem = ProblemKind::image;
  c.pairs = 2000;
  c.layers = 4;
  c.hidden = {128};
  c.standardize = false;
  c.outer_layers = 4;
  c.outer_hidden = {64};
  c.supervised = {3000, 64, 1e-3, LrSchedule::cosine, 0.05, 0.0};
  c.unsupervised = {2000, 32, 1e-3, LrSchedule::constant, 0.1, 0.0};
  c.modes = {"scratch", "warm"};
  c.seeds = {1, 2, 3};
  c.samples = 256;
  return c;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value '" + v + "' for key '" + key + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean '" + v + "' for key '" + key + "'");
}

inline LrSchedule parse_schedule(const std::string& key, const std::string& v) {
  if (v == "constant") return LrSchedule::constant;
  if (v == "cosine") return LrSchedule::cosine;
  throw ConfigError("bad schedule '" + v + "' for key '" + key + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) out.push_back(parse_number<std::size_t>(key, item));
  if (out.empty()) throw ConfigError("empty list for key '" + key + "'");
  return out;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_same_v<T, std::string>)
      s += v[i];
    else
      s += std::to_string(v[i]);
  }
  return s;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

inline void add_phase(std::vector<std::pair<std::string, Field>>& f, const std::string& prefix,
                      PhaseConfig ExperimentConfig::*ph) {
  f.push_back({prefix + "_iterations",
               {[ph](auto& c, auto& k, auto& v) { (c.*ph).iterations = parse_number<std::size_t>(k, v); },
                [ph](auto& c) { return std::to_string((c.*ph).iterations); }}});
  f.push_back({prefix + "_batch",
               {[ph](auto& c, auto& k, auto& v) { (c.*ph).batch = parse_number<std::size_t>(k, v); },
                [ph](auto& c) { return std::to_string((c.*ph).batch); }}});
  f.push_back({prefix + "_lr",
               {[ph](auto& c, auto& k, auto& v) { (c.*ph).lr = parse_number<double>(k, v); },
                [ph](auto& c) { return fmt((c.*ph).lr); }}});
  f.push_back({prefix + "_schedule",
               {[ph](auto& c, auto& k, auto& v) { (c.*ph).schedule = parse_schedule(k, v); },
                [ph](auto& c) { return std::string((c.*ph).schedule == LrSchedule::cosine ? "cosine" : "constant"); }}});
  f.push_back({prefix + "_lr_final_fraction",
               {[ph](auto& c, auto& k, auto& v) { (c.*ph).lr_final_fraction = parse_number<double>(k, v); },
                [ph](auto& c) { return fmt((c.*ph).lr_final_fraction); }}});
  f.push_back({prefix + "_weight_decay",
               {[ph](auto& c, auto& k, auto& v) { (c.*ph).weight_decay = parse_number<double>(k, v); },
                [ph](auto& c) { return fmt((c.*ph).weight_decay); }}});
}

/// Every key in canonical order.
inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const auto table = [] {
    std::vector<std::pair<std::string, Field>> f;
    auto size_field = [&](const char* name, std::size_t ExperimentConfig::*m) {
      f.push_back({name,
                   {[m](auto& c, auto& k, auto& v) { c.*m = parse_number<std::size_t>(k, v); },
                    [m](auto& c) { return std::to_string(c.*m); }}});
    };
    auto u64_field = [&](const char* name, std::uint64_t ExperimentConfig::*m) {
      f.push_back({name,
                   {[m](auto& c, auto& k, auto& v) { c.*m = parse_number<std::uint64_t>(k, v); },
                    [m](auto& c) { return std::to_string(c.*m); }}});
    };
    auto real_field = [&](const char* name, double ExperimentConfig::*m) {
      f.push_back({name,
                   {[m](auto& c, auto& k, auto& v) { c.*m = parse_number<double>(k, v); },
                    [m](auto& c) { return fmt(c.*m); }}});
    };
    auto sizes_field = [&](const char* name, std::vector<std::size_t> ExperimentConfig::*m) {
      f.push_back({name,
                   {[m](auto& c, auto& k, auto& v) { c.*m = parse_sizes(k, v); },
                    [m](auto& c) { return join(c.*m); }}});
    };
    f.push_back({"problem",
                 {[](auto& c, auto&, auto& v) {
                    if (v != "gaussian" && v != "image") throw ConfigError("problem must be gaussian or image");
                  },
                  [](auto& c) { return std::string(c.problem == ProblemKind::gaussian ? "gaussian" : "image"); }}});
    u64_field("seed", &ExperimentConfig::seed);
    u64_field("problem_seed", &ExperimentConfig::problem_seed);
    size_field("nx", &ExperimentConfig::nx);
    size_field("ny", &ExperimentConfig::ny);
    size_field("image_side", &ExperimentConfig::image_side);
    real_field("sensing_rate", &ExperimentConfig::sensing_rate);
    size_field("pairs", &ExperimentConfig::pairs);
    size_field("layers", &ExperimentConfig::layers);
    sizes_field("hidden", &ExperimentConfig::hidden);
    real_field("clamp", &ExperimentConfig::clamp);
    f.push_back({"standardize",
                 {[](auto& c, auto& k, auto& v) { c.standardize = parse_bool(k, v); },
                  [](auto& c) { return std::string(c.standardize ? "true" : "false"); }}});
    size_field("outer_layers", &ExperimentConfig::outer_layers);
    sizes_field("outer_hidden", &ExperimentConfig::outer_hidden);
    add_phase(f, "sup", &ExperimentConfig::supervised);
    add_phase(f, "unsup", &ExperimentConfig::unsupervised);
    f.push_back({"modes",
                 {[](auto& c, auto&, auto& v) { c.modes = split_list(v); }, [](auto& c) { return join(c.modes); }}});
    sizes_field("seeds", &ExperimentConfig::seeds);
    size_field("samples", &ExperimentConfig::samples);
    size_field("window", &ExperimentConfig::window);
    return f;
  }();
  return table;
}

}  // namespace detail

/// Parses config text; errors carry the line number.
inline ExperimentConfig parse_config(std::string_view text) {
  std::vector<std::tuple<std::size_t, std::string, std::string>> entries;
  std::stringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  std::string problem = "gaussian";
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = detail::trim(std::string_view(t).substr(0, eq));
    std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": empty key or value");
    if (key == "problem") problem = value;
    entries.emplace_back(lineno, std::move(key), std::move(value));
  }
  if (problem != "gaussian" && problem != "image") throw ConfigError("problem must be gaussian or image");
  ExperimentConfig cfg = problem == "image" ? image_defaults() : ExperimentConfig{};
  const auto& table = detail::fields();
  for (const auto& [ln, key, value] : entries) {
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.first == key; });
    if (it == table.end()) throw ConfigError("line " + std::to_string(ln) + ": unknown key '" + key + "'");
    try {
      it->second.set(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(ln) + ": " + e.what());
    }
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text form; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : detail::fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

}  // namespace cnf::harness
