#pragma once

// Run metrics and their on-disk form.
//
// metrics.csv     iteration,layer,loss,error,firing_rate   (one row per eval point and layer)
// train_loss.csv  iteration,layer,loss                     (mean training loss of every minibatch)
// timing.csv      iteration,seconds_per_step               (wall clock; not reproducible)
// error_curves.svg, readouts.svg                           (optional plots)

#include "decolle/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace decolle {

struct MetricsRow {
  std::int64_t iteration = 0;
  int layer = 0;
  double loss = 0;
  double error = 0;
  double firing_rate = 0;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

struct TrainLossRow {
  std::int64_t iteration = 0;
  int layer = 0;
  double loss = 0;
};

struct RunMetrics {
  std::vector<MetricsRow> rows;
  std::vector<TrainLossRow> train_loss;
  std::vector<std::pair<std::int64_t, double>> seconds_per_step;
  std::int64_t minibatches = 0;
  std::int64_t updates_per_minibatch = 0;
  std::int64_t total_updates = 0;
  std::size_t learning_buffer_bytes = 0;
  // Readout and target of each layer over the last evaluation pass (regression).
  std::vector<std::vector<float>> readout_trace;
  std::vector<std::vector<float>> target_trace;

  std::vector<MetricsRow> layer_rows(int layer) const {
    std::vector<MetricsRow> out;
    for (const auto& r : rows) {
      if (r.layer == layer) out.push_back(r);
    }
    return out;
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

inline std::string polyline_svg(const std::string& title, const std::vector<std::string>& names,
                                const std::vector<std::vector<std::pair<double, double>>>& series,
                                const std::string& x_label) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  double x0 = std::numeric_limits<double>::max(), x1 = std::numeric_limits<double>::lowest();
  double y0 = x0, y1 = x1;
  for (const auto& s : series) {
    for (auto [x, y] : s) {
      if (!std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double W = 640, H = 360, L = 60, R = 20, T = 30, B = 40;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
  o << "<text x=\"" << L - 5 << "\" y=\"" << T + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << y1 << "</text>\n";
  o << "<text x=\"" << L - 5 << "\" y=\"" << H - B << "\" text-anchor=\"end\" font-size=\"10\">" << y0 << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* c = colors[i % 6];
    o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\"";
    if (names[i].find("target") != std::string::npos) o << " stroke-dasharray=\"4,3\"";
    o << " points=\"";
    for (auto [x, y] : series[i]) {
      if (std::isfinite(y)) o << sx(x) << ',' << sy(y) << ' ';
    }
    o << "\"/>\n";
    o << "<text x=\"" << W - R - 120 << "\" y=\"" << T + 14 * (i + 1) << "\" font-size=\"11\" fill=\"" << c << "\">"
      << names[i] << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace detail

inline void write_metrics_csv(const std::filesystem::path& path, const RunMetrics& m) {
  auto out = detail::open_out(path);
  out << "iteration,layer,loss,error,firing_rate\n";
  for (const auto& r : m.rows) {
    out << r.iteration << ',' << r.layer << ',' << detail::fmt_double(r.loss) << ',' << detail::fmt_double(r.error)
        << ',' << detail::fmt_double(r.firing_rate) << '\n';
  }
}

inline std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "iteration,layer,loss,error,firing_rate") throw IoError("unexpected metrics header in " + path.string());
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw IoError("malformed metrics row: " + line);
    try {
      rows.push_back({std::stoll(f[0]), std::stoi(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
    } catch (const std::logic_error&) {
      throw IoError("malformed metrics row: " + line);
    }
  }
  return rows;
}

/// Write every metrics file of a run into `dir`.
inline void emit_metrics(const RunMetrics& m, const std::filesystem::path& dir, bool plot = true) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_metrics_csv(dir / "metrics.csv", m);
  {
    auto out = detail::open_out(dir / "train_loss.csv");
    out << "iteration,layer,loss\n";
    for (const auto& r : m.train_loss) out << r.iteration << ',' << r.layer << ',' << detail::fmt_double(r.loss) << '\n';
  }
  {
    auto out = detail::open_out(dir / "timing.csv");
    out << "iteration,seconds_per_step\n";
    for (auto [it, s] : m.seconds_per_step) out << it << ',' << detail::fmt_double(s) << '\n';
  }
  {
    double secs = 0;
    for (auto [it, s] : m.seconds_per_step) secs += s;
    if (!m.seconds_per_step.empty()) secs /= static_cast<double>(m.seconds_per_step.size());
    auto out = detail::open_out(dir / "summary.json");
    out << "{\n  \"minibatches\": " << m.minibatches << ",\n  \"updates_per_minibatch\": " << m.updates_per_minibatch
        << ",\n  \"total_updates\": " << m.total_updates << ",\n  \"learning_buffer_bytes\": "
        << m.learning_buffer_bytes << ",\n  \"mean_seconds_per_step\": " << detail::fmt_double(secs) << "\n}\n";
  }
  if (!plot) return;

  int layers = 0;
  for (const auto& r : m.rows) layers = std::max(layers, r.layer + 1);
  if (layers > 0) {
    std::vector<std::string> names;
    std::vector<std::vector<std::pair<double, double>>> series;
    for (int l = 0; l < layers; ++l) {
      names.push_back("layer " + std::to_string(l + 1));
      series.emplace_back();
      for (const auto& r : m.layer_rows(l)) series.back().emplace_back(double(r.iteration), r.error);
    }
    auto out = detail::open_out(dir / "error_curves.svg");
    out << detail::polyline_svg("Evaluation error per layer", names, series, "iteration");
  }
  if (!m.readout_trace.empty()) {
    std::vector<std::string> names;
    std::vector<std::vector<std::pair<double, double>>> series;
    for (std::size_t l = 0; l < m.readout_trace.size(); ++l) {
      names.push_back("layer " + std::to_string(l + 1) + " readout");
      series.emplace_back();
      for (std::size_t t = 0; t < m.readout_trace[l].size(); ++t) series.back().emplace_back(double(t), m.readout_trace[l][t]);
      names.push_back("layer " + std::to_string(l + 1) + " target");
      series.emplace_back();
      for (std::size_t t = 0; t < m.target_trace[l].size(); ++t) series.back().emplace_back(double(t), m.target_trace[l][t]);
    }
    auto out = detail::open_out(dir / "readouts.svg");
    out << detail::polyline_svg("Readouts and pseudo-targets", names, series, "time step (ms)");
    auto csv = detail::open_out(dir / "readouts.csv");
    csv << "step";
    for (std::size_t l = 0; l < m.readout_trace.size(); ++l) csv << ",readout" << l + 1 << ",target" << l + 1;
    csv << '\n';
    for (std::size_t t = 0; t < m.readout_trace[0].size(); ++t) {
      csv << t;
      for (std::size_t l = 0; l < m.readout_trace.size(); ++l) {
        csv << ',' << detail::fmt_double(m.readout_trace[l][t]) << ',' << detail::fmt_double(m.target_trace[l][t]);
      }
      csv << '\n';
    }
  }
}

}  // namespace decolle
