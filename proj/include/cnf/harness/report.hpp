#pragma once

// Posterior summaries and the CSV / SVG emitters. Output is a pure function
// of the inputs (no timestamps), so reruns are byte-identical.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "cnf/errors.hpp"
#include "cnf/objectives.hpp"

namespace cnf::harness {

/// Draws are stored one sample per column (N_x x m).
struct PosteriorSamples {
  Matrix draws;
  Vector mean;
  Vector std;
  std::optional<Matrix> cov;  // only when N_x <= 64
};

inline constexpr std::size_t kMaxCovarianceDim = 64;

inline PosteriorSamples posterior_stats(Matrix draws) {
  const auto m = draws.cols();
  if (m < 2) throw ConfigError("posterior statistics need at least 2 draws");
  if (!all_finite(draws)) throw NumericError("posterior draws contain non-finite values");
  PosteriorSamples s;
  s.mean = draws.rowwise().mean();
  const Matrix centered = draws.colwise() - s.mean;
  const double denom = static_cast<double>(m - 1);
  s.std = (centered.array().square().rowwise().sum() / denom).sqrt().matrix();
  if (static_cast<std::size_t>(draws.rows()) <= kMaxCovarianceDim) s.cov = centered * centered.transpose() / denom;
  s.draws = std::move(draws);
  return s;
}

struct MomentErrors {
  double mean = 0.0;  // ||mean - ref|| / ||ref||
  double cov = 0.0;   // ||cov - ref||_F / ||ref||_F
};

inline MomentErrors moment_errors(const PosteriorSamples& s, const Vector& ref_mean, const Matrix& ref_cov) {
  if (!s.cov) throw ConfigError("covariance was not computed for this dimension");
  return {(s.mean - ref_mean).norm() / ref_mean.norm(), (*s.cov - ref_cov).norm() / ref_cov.norm()};
}

/// Peak signal-to-noise ratio in dB, peak = dynamic range of the truth.
inline double psnr(const Vector& estimate, const Vector& truth) {
  if (estimate.size() != truth.size() || truth.size() == 0) throw DimensionError("psnr inputs differ in size");
  const double range = truth.maxCoeff() - truth.minCoeff();
  const double mse = (estimate - truth).squaredNorm() / static_cast<double>(truth.size());
  if (!(range > 0.0)) throw ConfigError("psnr needs a non-constant reference");
  return 10.0 * std::log10(range * range / mse);
}

namespace detail {

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string g4(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kTraceHeader = "iteration,loss,mode,seed\n";

inline std::string trace_csv(const std::vector<LossTrace>& traces) {
  std::string out = kTraceHeader;
  for (const auto& t : traces)
    for (std::size_t i = 0; i < t.values.size(); ++i)
      out += std::to_string(i) + "," + detail::g17(t.values[i]) + "," + t.mode + "," + std::to_string(t.seed) + "\n";
  return out;
}

inline std::string trace_csv(const LossTrace& t) { return trace_csv(std::vector<LossTrace>{t}); }

/// Inverse of trace_csv; rows are grouped into traces by (mode, seed) in order
/// of first appearance.
inline std::vector<LossTrace> parse_trace_csv(const std::string& text) {
  std::vector<LossTrace> out;
  std::size_t pos = 0, lineno = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (lineno == 1) {
      if (line + "\n" != kTraceHeader) throw ConfigError("trace CSV has an unexpected header");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t s = 0;
    for (std::size_t c = line.find(','); c != std::string::npos; c = line.find(',', s)) {
      cols.push_back(line.substr(s, c - s));
      s = c + 1;
    }
    cols.push_back(line.substr(s));
    if (cols.size() != 4) throw ConfigError("trace CSV line " + std::to_string(lineno) + " needs 4 fields");
    const auto seed = std::stoull(cols[3]);
    auto it = std::find_if(out.begin(), out.end(), [&](const LossTrace& t) { return t.mode == cols[2] && t.seed == seed; });
    if (it == out.end()) {
      out.push_back({});
      it = out.end() - 1;
      it->mode = cols[2];
      it->seed = seed;
    }
    if (std::stoull(cols[0]) != it->values.size())
      throw ConfigError("trace CSV line " + std::to_string(lineno) + " is out of order");
    it->values.push_back(std::stod(cols[1]));
    it->iterations = it->values.size();
  }
  return out;
}

/// Plain numeric matrix, one row per line.
inline std::string matrix_csv(const Matrix& m) {
  std::string out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out += ",";
      out += detail::g17(m(i, j));
    }
    out += "\n";
  }
  return out;
}

/// Column-major flat image (as produced by the image generator) to side x side.
inline Matrix as_image(const Vector& flat, std::size_t side) {
  if (static_cast<std::size_t>(flat.size()) != side * side) throw DimensionError("image vector has the wrong size");
  return Eigen::Map<const Matrix>(flat.data(), static_cast<Eigen::Index>(side), static_cast<Eigen::Index>(side));
}

// ---------------------------------------------------------------------------
// SVG

inline constexpr int kSvgWidth = 800;
inline constexpr int kSvgHeight = 600;

/// Loss curves: one polyline per trace, linear x, log y when every value is
/// positive.
inline std::string traces_svg(const std::vector<LossTrace>& traces, const std::string& title) {
  constexpr double left = 80, right = 160, top = 50, bottom = 60;
  const double pw = kSvgWidth - left - right, ph = kSvgHeight - top - bottom;
  bool all_positive = true;
  double lo = INFINITY, hi = -INFINITY;
  std::size_t max_len = 0;
  for (const auto& t : traces) {
    max_len = std::max(max_len, t.values.size());
    for (double v : t.values) {
      all_positive = all_positive && v > 0.0;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  auto fy = [&](double v) { return all_positive ? std::log10(v) : v; };
  double ylo = std::isfinite(lo) ? fy(lo) : 0.0, yhi = std::isfinite(hi) ? fy(hi) : 1.0;
  if (yhi - ylo < 1e-12) {
    ylo -= 0.5;
    yhi += 0.5;
  }
  const double xmax = max_len > 1 ? static_cast<double>(max_len - 1) : 1.0;
  auto px = [&](double i) { return left + pw * i / xmax; };
  auto py = [&](double v) { return top + ph * (1.0 - (fy(v) - ylo) / (yhi - ylo)); };

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"600\" viewBox=\"0 0 800 600\">\n";
  s += "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n";
  s += "<text x=\"400\" y=\"28\" text-anchor=\"middle\" font-size=\"18\">" + detail::xml_escape(title) + "</text>\n";
  s += "<rect x=\"" + detail::g4(left) + "\" y=\"" + detail::g4(top) + "\" width=\"" + detail::g4(pw) + "\" height=\"" +
       detail::g4(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  // Tick labels at the ends of both axes.
  auto label = [&](double x, double y, const std::string& text, const char* anchor) {
    s += "<text x=\"" + detail::g4(x) + "\" y=\"" + detail::g4(y) + "\" text-anchor=\"" + anchor +
         "\" font-size=\"12\">" + detail::xml_escape(text) + "</text>\n";
  };
  label(left, top + ph + 18, "0", "middle");
  label(left + pw, top + ph + 18, std::to_string(static_cast<long long>(xmax)), "middle");
  label(left - 6, top + ph, detail::g4(all_positive ? std::pow(10.0, ylo) : ylo), "end");
  label(left - 6, top + 12, detail::g4(all_positive ? std::pow(10.0, yhi) : yhi), "end");
  label(left + pw / 2, kSvgHeight - 15, "iteration", "middle");
  s += "<text x=\"20\" y=\"" + detail::g4(top + ph / 2) + "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 20 " +
       detail::g4(top + ph / 2) + ")\">" + (all_positive ? "loss (log scale)" : "loss") + "</text>\n";

  for (std::size_t k = 0; k < traces.size(); ++k) {
    const auto& t = traces[k];
    const char* color = palette[k % std::size(palette)];
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1\" points=\"";
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      if (i) s += " ";
      s += detail::g4(px(static_cast<double>(i))) + "," + detail::g4(py(t.values[i]));
    }
    s += "\"/>\n";
    const double ly = top + 20 + 20.0 * static_cast<double>(k);
    s += "<line x1=\"" + detail::g4(left + pw + 10) + "\" y1=\"" + detail::g4(ly - 4) + "\" x2=\"" +
         detail::g4(left + pw + 30) + "\" y2=\"" + detail::g4(ly - 4) + "\" stroke=\"" + color + "\"/>\n";
    label(left + pw + 35, ly, t.mode + " seed " + std::to_string(t.seed), "start");
  }
  s += "</svg>\n";
  return s;
}

/// Grayscale raster, one rect per pixel; black = min, white = max.
inline std::string raster_svg(const Matrix& img, const std::string& title) {
  if (img.size() == 0) throw ConfigError("cannot rasterize an empty image");
  const double lo = img.minCoeff(), hi = img.maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  const double cell = std::min(700.0 / static_cast<double>(img.cols()), 500.0 / static_cast<double>(img.rows()));
  const double x0 = (kSvgWidth - cell * static_cast<double>(img.cols())) / 2, y0 = 60;
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"600\" viewBox=\"0 0 800 600\">\n";
  s += "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n";
  s += "<text x=\"400\" y=\"30\" text-anchor=\"middle\" font-size=\"18\">" + detail::xml_escape(title) + "</text>\n";
  for (Eigen::Index i = 0; i < img.rows(); ++i)
    for (Eigen::Index j = 0; j < img.cols(); ++j) {
      const int g = static_cast<int>(std::lround(255.0 * (img(i, j) - lo) / span));
      s += "<rect x=\"" + detail::g4(x0 + cell * static_cast<double>(j)) + "\" y=\"" +
           detail::g4(y0 + cell * static_cast<double>(i)) + "\" width=\"" + detail::g4(cell) + "\" height=\"" +
           detail::g4(cell) + "\" fill=\"rgb(" + std::to_string(g) + "," + std::to_string(g) + "," + std::to_string(g) +
           ")\"/>\n";
    }
  s += "<text x=\"400\" y=\"590\" text-anchor=\"middle\" font-size=\"12\">range [" + detail::g4(lo) + ", " +
       detail::g4(hi) + "]</text>\n";
  s += "</svg>\n";
  return s;
}

}  // namespace cnf::harness
