#pragma once

// Iterations-to-threshold comparison between init modes. L* is the final
// smoothed loss of the scratch run for the same seed; smoothing is a trailing
// mean over `window` iterations and is only defined once a full window exists.

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cnf/errors.hpp"
#include "cnf/objectives.hpp"

namespace cnf::harness {

/// smoothed[k] = mean(values[k .. k + window - 1]); it belongs to iteration
/// k + window - 1.
inline std::vector<double> smooth(const std::vector<double>& values, std::size_t window) {
  if (window == 0) throw ConfigError("smoothing window must be positive");
  if (values.size() < window)
    throw ConfigError("trace of length " + std::to_string(values.size()) + " is shorter than the smoothing window " +
                      std::to_string(window));
  std::vector<double> out;
  out.reserve(values.size() - window + 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < window; ++i) sum += values[i];
  out.push_back(sum / static_cast<double>(window));
  // Recomputing each window keeps the result independent of summation history.
  for (std::size_t k = 1; k + window <= values.size(); ++k) {
    sum = 0.0;
    for (std::size_t i = k; i < k + window; ++i) sum += values[i];
    out.push_back(sum / static_cast<double>(window));
  }
  return out;
}

/// Iterations needed (1-based count) until the smoothed loss first reaches
/// `threshold`; empty if it never does.
inline std::optional<std::size_t> iters_to_threshold(const std::vector<double>& values, double threshold,
                                                     std::size_t window) {
  const auto s = smooth(values, window);
  for (std::size_t k = 0; k < s.size(); ++k)
    if (s[k] <= threshold) return k + window;
  return std::nullopt;
}

struct SpeedupRow {
  std::string mode;
  std::uint64_t seed = 0;
  std::optional<std::size_t> iters;  // empty: never reached L*
  std::optional<double> ratio;       // iters / scratch iters
  double threshold = 0.0;            // L* for this seed
  double initial_smoothed = 0.0;     // first full-window mean
};

struct SpeedupReport {
  std::vector<SpeedupRow> rows;
  std::map<std::string, double> median_ratio;  // modes whose every seed reached L*
  std::map<std::string, std::size_t> reached;  // seeds that reached L*, per mode
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of an empty set");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Rows are ordered by seed, then by the order modes appear in `traces`.
inline SpeedupReport compare_speedup(const std::vector<LossTrace>& traces, std::size_t window = 100) {
  std::map<std::uint64_t, std::vector<const LossTrace*>> by_seed;
  for (const auto& t : traces) by_seed[t.seed].push_back(&t);
  SpeedupReport rep;
  std::map<std::string, std::vector<double>> ratios;
  std::vector<std::string> mode_order;
  for (const auto& t : traces)
    if (std::find(mode_order.begin(), mode_order.end(), t.mode) == mode_order.end()) mode_order.push_back(t.mode);

  for (const auto& [seed, list] : by_seed) {
    auto find = [&](const std::string& m) {
      auto it = std::find_if(list.begin(), list.end(), [&](const LossTrace* t) { return t->mode == m; });
      return it == list.end() ? nullptr : *it;
    };
    const LossTrace* scratch = find("scratch");
    if (!scratch) throw ConfigError("seed " + std::to_string(seed) + " has no scratch trace");
    if (!find("warm")) throw ConfigError("seed " + std::to_string(seed) + " has no warm trace");
    const double threshold = smooth(scratch->values, window).back();
    const auto base = iters_to_threshold(scratch->values, threshold, window);
    for (const auto& mode : mode_order) {
      const LossTrace* t = find(mode);
      if (!t) continue;
      SpeedupRow row;
      row.mode = mode;
      row.seed = seed;
      row.threshold = threshold;
      row.initial_smoothed = smooth(t->values, window).front();
      row.iters = iters_to_threshold(t->values, threshold, window);
      if (row.iters) {
        row.ratio = static_cast<double>(*row.iters) / static_cast<double>(*base);
        ratios[mode].push_back(*row.ratio);
        ++rep.reached[mode];
      } else {
        rep.reached[mode] += 0;
      }
      rep.rows.push_back(std::move(row));
    }
  }
  for (const auto& [mode, r] : ratios)
    if (r.size() == by_seed.size()) rep.median_ratio[mode] = median(r);
  return rep;
}

inline std::string speedup_csv(const SpeedupReport& rep) {
  std::string out = "mode,seed,iters_to_threshold,ratio,threshold,initial_smoothed\n";
  char buf[64];
  for (const auto& r : rep.rows) {
    out += r.mode + "," + std::to_string(r.seed) + ",";
    out += r.iters ? std::to_string(*r.iters) : std::string("NA");
    out += ",";
    if (r.ratio) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.ratio);
      out += buf;
    } else {
      out += "NA";
    }
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", r.threshold, r.initial_smoothed);
    out += buf;
  }
  return out;
}

}  // namespace cnf::harness
