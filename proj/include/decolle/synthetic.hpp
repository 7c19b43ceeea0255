#pragma once

// Synthetic event recordings for tests and desk-scale runs:
//  - "gesture": 11 classes of a moving disk on a 128x128 sensor (8 sweep
//    directions, clockwise and counter-clockwise circles, a pulsing disk)
//  - "digits": 10 classes of 5x7 glyphs scaled up on a 34x34 sensor and moved
//    along three 100 ms saccades
// Events are emitted where a pixel enters (on) or leaves (off) the sprite.

#include "decolle/events.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace decolle {

struct SynthSpec {
  double duration_ms = 2000;
  double emit_prob = 0.5;     // probability that a changed pixel emits an event
  double noise_per_ms = 1.0;  // mean number of background events per ms
};

struct Box {
  int x0, y0, x1, y1;  // inclusive
};

namespace detail {

/// `inside(t, x, y)` and `bounds(t)` describe the sprite at integer ms `t`.
template <typename Inside, typename Bounds, typename Rng>
EventStream render_events(int width, int height, const SynthSpec& spec, Inside inside, Bounds bounds,
                          Rng& rng) {
  EventStream s;
  s.width = width;
  s.height = height;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> micro(0, 999);
  std::uniform_int_distribution<int> px(0, width - 1);
  std::uniform_int_distribution<int> py(0, height - 1);
  std::poisson_distribution<int> noise(spec.noise_per_ms);
  const int steps = static_cast<int>(spec.duration_ms);
  for (int t = 1; t < steps; ++t) {
    const Box a = bounds(t - 1);
    const Box b = bounds(t);
    const int x0 = std::max(0, std::min(a.x0, b.x0));
    const int y0 = std::max(0, std::min(a.y0, b.y0));
    const int x1 = std::min(width - 1, std::max(a.x1, b.x1));
    const int y1 = std::min(height - 1, std::max(a.y1, b.y1));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const bool before = inside(t - 1, x, y);
        const bool now = inside(t, x, y);
        if (before == now || unit(rng) >= spec.emit_prob) continue;
        s.events.push_back({std::int64_t{t} * 1000 + micro(rng), static_cast<std::uint16_t>(x),
                            static_cast<std::uint16_t>(y), now ? Polarity::on : Polarity::off});
      }
    }
    if (spec.noise_per_ms > 0) {
      for (int n = noise(rng); n > 0; --n) {
        s.events.push_back({std::int64_t{t} * 1000 + micro(rng), static_cast<std::uint16_t>(px(rng)),
                            static_cast<std::uint16_t>(py(rng)), unit(rng) < 0.5 ? Polarity::on : Polarity::off});
      }
    }
  }
  std::stable_sort(s.events.begin(), s.events.end(), [](const Event& l, const Event& r) { return l.t < r.t; });
  return s;
}

// 5x7 glyphs, rows top to bottom.
inline constexpr std::array<std::array<const char*, 7>, 10> kGlyphs = {{
    {{".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."}},
    {{"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."}},
    {{".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"}},
    {{"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."}},
    {{"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."}},
    {{"#####", "#....", "####.", "....#", "....#", "#...#", ".###."}},
    {{"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."}},
    {{"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."}},
    {{".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."}},
    {{".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."}},
}};

inline bool glyph_cell(int digit, int gx, int gy) {
  return kGlyphs[static_cast<std::size_t>(digit)][static_cast<std::size_t>(gy)][gx] == '#';
}

}  // namespace detail

/// Moving-disk recording of gesture class `label` in [0, 11).
inline EventStream synth_gesture(int label, std::uint64_t seed, const SynthSpec& spec = {},
                                 int sensor = 128) {
  if (label < 0 || label >= 11) throw ConfigError("gesture label must be in [0, 11)");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  const double scale = sensor / 128.0;
  const double cx = sensor / 2.0 + 8.0 * scale * jitter(rng);
  const double cy = sensor / 2.0 + 8.0 * scale * jitter(rng);
  const double radius = (10.0 + 2.0 * jitter(rng)) * scale;
  const double period = 500.0 * (1.0 + 0.15 * jitter(rng));
  const double phase = 0.5 + 0.5 * jitter(rng);
  const double span = 60.0 * scale;
  const double pi = std::numbers::pi;

  auto center = [=](double t, double& x, double& y, double& r) {
    const double u = t / period + phase;
    r = radius;
    if (label < 8) {
      const double ang = label * pi / 4.0;
      const double d = span * (u - std::floor(u) - 0.5);
      x = cx + d * std::cos(ang);
      y = cy + d * std::sin(ang);
    } else if (label < 10) {
      const double dir = label == 8 ? 1.0 : -1.0;
      x = cx + 0.4 * span * std::cos(dir * 2.0 * pi * u);
      y = cy + 0.4 * span * std::sin(dir * 2.0 * pi * u);
    } else {
      x = cx;
      y = cy;
      r = radius * (1.0 + 0.8 * std::sin(2.0 * pi * u));
    }
  };
  const int steps = std::max(1, static_cast<int>(spec.duration_ms));
  std::vector<double> xs(steps), ys(steps), rs(steps);
  for (int t = 0; t < steps; ++t) center(t, xs[t], ys[t], rs[t]);
  auto inside = [&](int t, int x, int y) {
    const double dx = x - std::floor(xs[t]);
    const double dy = y - std::floor(ys[t]);
    return dx * dx + dy * dy <= rs[t] * rs[t];
  };
  auto bounds = [&](int t) {
    const int ir = static_cast<int>(std::ceil(rs[t])) + 1;
    const int ix = static_cast<int>(std::floor(xs[t]));
    const int iy = static_cast<int>(std::floor(ys[t]));
    return Box{ix - ir, iy - ir, ix + ir, iy + ir};
  };
  return detail::render_events(sensor, sensor, spec, inside, bounds, rng);
}

/// Saccading digit glyph on a 34x34 sensor; three saccades of duration/3 each.
inline EventStream synth_digit(int digit, std::uint64_t seed, const SynthSpec& spec = {300, 0.7, 0.5}) {
  if (digit < 0 || digit >= 10) throw ConfigError("digit must be in [0, 10)");
  constexpr int kSensor = 34;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> off(2, 6);
  std::uniform_int_distribution<int> cell_w(3, 4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int ox = off(rng);
  const int oy = off(rng);
  const int sx = cell_w(rng);
  const int sy = 3;
  std::array<bool, 35> cells{};
  for (int gy = 0; gy < 7; ++gy) {
    for (int gx = 0; gx < 5; ++gx) {
      cells[static_cast<std::size_t>(gy * 5 + gx)] = detail::glyph_cell(digit, gx, gy) && unit(rng) >= 0.05;
    }
  }
  const double leg = spec.duration_ms / 3.0;
  auto offset = [=](int t, int& dx, int& dy) {
    // triangle: (0,0) -> (4,4) -> (8,0) -> (0,0)
    const double u = std::fmod(t / leg, 3.0);
    const double f = u - std::floor(u);
    double x, y;
    if (u < 1) {
      x = 4 * f;
      y = 4 * f;
    } else if (u < 2) {
      x = 4 + 4 * f;
      y = 4 - 4 * f;
    } else {
      x = 8 - 8 * f;
      y = 0;
    }
    dx = static_cast<int>(std::floor(x));
    dy = static_cast<int>(std::floor(y));
  };
  auto inside = [&](int t, int x, int y) {
    int dx, dy;
    offset(t, dx, dy);
    const int lx = x - ox - dx;
    const int ly = y - oy - dy;
    if (lx < 0 || ly < 0 || lx >= 5 * sx || ly >= 7 * sy) return false;
    return cells[static_cast<std::size_t>((ly / sy) * 5 + lx / sx)];
  };
  auto bounds = [&](int t) {
    int dx, dy;
    offset(t, dx, dy);
    return Box{ox + dx, oy + dy, ox + dx + 5 * sx, oy + dy + 7 * sy};
  };
  return detail::render_events(kSensor, kSensor, spec, inside, bounds, rng);
}

enum class SynthKind { gesture, digits };

struct SynthDatasetSpec {
  SynthKind kind = SynthKind::gesture;
  int train_per_class = 10;
  int test_per_class = 5;
  std::uint64_t seed = 1;
  SynthSpec recording = {};
};

inline int synth_classes(SynthKind k) { return k == SynthKind::gesture ? 11 : 10; }

/// Write one event file per recording plus manifest.tsv into `dir`.
inline std::vector<ManifestEntry> write_synthetic_dataset(const std::filesystem::path& dir,
                                                          const SynthDatasetSpec& spec) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestEntry> rows;
  std::mt19937_64 seeds(spec.seed);
  const int classes = synth_classes(spec.kind);
  for (const char* split : {"train", "test"}) {
    const int per_class = std::string(split) == "train" ? spec.train_per_class : spec.test_per_class;
    for (int i = 0; i < per_class; ++i) {
      for (int c = 0; c < classes; ++c) {
        const std::uint64_t s = seeds();
        const EventStream rec = spec.kind == SynthKind::gesture ? synth_gesture(c, s, spec.recording)
                                                                 : synth_digit(c, s, spec.recording);
        std::ostringstream name;
        name << split << '_' << std::setw(5) << std::setfill('0') << rows.size() << ".aedat";
        save_event_file(dir / name.str(), rec);
        ManifestEntry e;
        e.path = name.str();
        e.label = c;
        e.subject = "s" + std::to_string(i % 29);
        e.light = "synthetic";
        e.split = split;
        rows.push_back(e);
      }
    }
  }
  write_manifest(dir, rows);
  return rows;
}

}  // namespace decolle
