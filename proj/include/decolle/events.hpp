#pragma once

// Event-camera streams: AEDAT 3.1 polarity-packet reader/writer, spatial
// sum-downsampling, temporal binning, random slicing, and the Poisson
// regression task. The byte layout is documented in docs/event_format.md.

#include "decolle/errors.hpp"
#include "decolle/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace decolle {

enum class Polarity : std::uint8_t { off = 0, on = 1 };

struct Event {
  std::int64_t t = 0;  // microseconds
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  Polarity polarity = Polarity::on;

  friend bool operator==(const Event&, const Event&) = default;
};

struct EventStream {
  int width = 128;
  int height = 128;
  std::vector<Event> events;  // sorted by t, non-decreasing
  std::size_t skipped = 0;    // records dropped while parsing (other types, invalid)

  std::int64_t duration_us() const { return events.empty() ? 0 : events.back().t - events.front().t; }
  std::int64_t end_us() const { return events.empty() ? 0 : events.back().t; }

  friend bool operator==(const EventStream& a, const EventStream& b) {
    return a.width == b.width && a.height == b.height && a.events == b.events;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "event files are little-endian");

inline constexpr std::string_view kMagic = "#!AER-DAT";
inline constexpr std::string_view kEndHeader = "#!END-HEADER\r\n";
inline constexpr std::size_t kPacketHeaderBytes = 28;
inline constexpr std::int16_t kPolarityType = 1;
inline constexpr std::int32_t kPolarityEventBytes = 8;
inline constexpr std::size_t kEventsPerPacket = 8192;

template <typename V>
V read_le(const std::uint8_t* p) {
  V v;
  std::memcpy(&v, p, sizeof(V));
  return v;
}

template <typename V>
void write_le(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

inline int header_int(std::string_view line, std::string_view key, int fallback) {
  if (line.substr(0, key.size()) != key) return fallback;
  return std::stoi(std::string(line.substr(key.size())));
}

}  // namespace detail

/// Decode an AEDAT 3.1 byte buffer. Only polarity packets are decoded; other
/// packet types and invalid events are skipped and counted.
inline EventStream parse_event_file(std::string_view bytes) {
  using namespace detail;
  EventStream stream;
  const auto* data = reinterpret_cast<const std::uint8_t*>(bytes.data());
  const std::size_t size = bytes.size();

  std::size_t pos = 0;
  auto next_line = [&]() -> std::string_view {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw ParseError("unterminated header line", pos);
    std::string_view line = bytes.substr(pos, nl + 1 - pos);
    pos = nl + 1;
    return line;
  };

  std::string_view first = next_line();
  if (first.substr(0, kMagic.size()) != kMagic) {
    throw UnsupportedFormatError("not an AER-DAT file");
  }
  std::string_view version = first.substr(kMagic.size());
  while (!version.empty() && (version.back() == '\n' || version.back() == '\r')) version.remove_suffix(1);
  if (version != "3.1") {
    throw UnsupportedFormatError("unsupported AER-DAT version '" + std::string(version) + "'");
  }
  for (;;) {
    const std::size_t line_start = pos;
    std::string_view line = next_line();
    if (line == kEndHeader || line == "#!END-HEADER\n") break;
    if (line.empty() || line.front() != '#') throw ParseError("malformed header line", line_start);
    try {
      stream.width = header_int(line, "#Sensor-Width: ", stream.width);
      stream.height = header_int(line, "#Sensor-Height: ", stream.height);
    } catch (const std::exception&) {
      throw ParseError("malformed sensor size", line_start);
    }
  }
  if (stream.width <= 0 || stream.height <= 0) throw ParseError("invalid sensor size", pos);

  bool sorted = true;
  while (pos < size) {
    if (size - pos < kPacketHeaderBytes) throw ParseError("truncated packet header", pos);
    const auto type = read_le<std::int16_t>(data + pos);
    const auto event_size = read_le<std::int32_t>(data + pos + 4);
    const auto ts_overflow = read_le<std::int32_t>(data + pos + 12);
    const auto number = read_le<std::int32_t>(data + pos + 20);
    if (event_size <= 0 || number < 0) throw ParseError("invalid packet header", pos);
    pos += kPacketHeaderBytes;

    const std::size_t stride = static_cast<std::size_t>(event_size);
    for (std::int32_t i = 0; i < number; ++i) {
      if (size - pos < stride) throw ParseError("truncated event record", pos);
      if (type != kPolarityType || event_size < kPolarityEventBytes) {
        ++stream.skipped;
        pos += stride;
        continue;
      }
      const auto word = read_le<std::uint32_t>(data + pos);
      const auto ts = read_le<std::int32_t>(data + pos + 4);
      pos += stride;
      const std::uint32_t x = (word >> 17) & 0x7FFFu;
      const std::uint32_t y = (word >> 2) & 0x7FFFu;
      if ((word & 1u) == 0 || x >= static_cast<std::uint32_t>(stream.width) ||
          y >= static_cast<std::uint32_t>(stream.height)) {
        ++stream.skipped;
        continue;
      }
      Event e;
      e.t = (std::int64_t{ts_overflow} << 31) | static_cast<std::int64_t>(static_cast<std::uint32_t>(ts));
      e.x = static_cast<std::uint16_t>(x);
      e.y = static_cast<std::uint16_t>(y);
      e.polarity = (word >> 1) & 1u ? Polarity::on : Polarity::off;
      if (!stream.events.empty() && e.t < stream.events.back().t) sorted = false;
      stream.events.push_back(e);
    }
  }
  if (!sorted) {
    std::stable_sort(stream.events.begin(), stream.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
  }
  return stream;
}

/// Encode a sorted stream. Output bytes depend only on the stream contents.
inline std::string write_event_file(const EventStream& stream) {
  using namespace detail;
  std::string out;
  out += "#!AER-DAT3.1\r\n";
  out += "#Format: RAW\r\n";
  out += "#Source 1: decolle\r\n";
  out += "#Sensor-Width: " + std::to_string(stream.width) + "\r\n";
  out += "#Sensor-Height: " + std::to_string(stream.height) + "\r\n";
  out += kEndHeader;

  const auto& ev = stream.events;
  std::size_t i = 0;
  while (i < ev.size()) {
    const std::int64_t overflow = ev[i].t >> 31;
    std::size_t j = i;
    while (j < ev.size() && j - i < kEventsPerPacket && (ev[j].t >> 31) == overflow) ++j;
    const auto n = static_cast<std::int32_t>(j - i);
    write_le<std::int16_t>(out, kPolarityType);
    write_le<std::int16_t>(out, 1);
    write_le<std::int32_t>(out, kPolarityEventBytes);
    write_le<std::int32_t>(out, 4);
    write_le<std::int32_t>(out, static_cast<std::int32_t>(overflow));
    write_le<std::int32_t>(out, n);
    write_le<std::int32_t>(out, n);
    write_le<std::int32_t>(out, n);
    for (; i < j; ++i) {
      const Event& e = ev[i];
      const std::uint32_t word = (std::uint32_t{e.x} << 17) | (std::uint32_t{e.y} << 2) |
                                 (e.polarity == Polarity::on ? 2u : 0u) | 1u;
      write_le<std::uint32_t>(out, word);
      write_le<std::int32_t>(out, static_cast<std::int32_t>(e.t & 0x7FFFFFFF));
    }
  }
  return out;
}

/// N-MNIST recording: 5-byte records holding x, y, then a polarity bit and a
/// 23-bit microsecond timestamp, most significant byte first. Sensor 34x34.
inline EventStream parse_nmnist_bin(std::string_view bytes) {
  if (bytes.size() % 5 != 0) throw ParseError("truncated N-MNIST record", bytes.size() - bytes.size() % 5);
  EventStream stream;
  stream.width = 34;
  stream.height = 34;
  stream.events.reserve(bytes.size() / 5);
  const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data());
  for (std::size_t i = 0; i < bytes.size(); i += 5) {
    Event e;
    e.x = p[i];
    e.y = p[i + 1];
    e.polarity = (p[i + 2] & 0x80) ? Polarity::on : Polarity::off;
    e.t = (std::int64_t{p[i + 2] & 0x7f} << 16) | (std::int64_t{p[i + 3]} << 8) | p[i + 4];
    if (e.x >= stream.width || e.y >= stream.height) {
      ++stream.skipped;
      continue;
    }
    stream.events.push_back(e);
  }
  std::stable_sort(stream.events.begin(), stream.events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
  return stream;
}

/// Reads an AEDAT 3.1 file, or an N-MNIST recording when the extension is .bin.
inline EventStream load_event_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open event file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  if (path.extension() == ".bin") return parse_nmnist_bin(buf.str());
  return parse_event_file(buf.str());
}

inline void save_event_file(const std::filesystem::path& path, const EventStream& stream) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write event file " + path.string());
  const std::string bytes = write_event_file(stream);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Merge factor x factor pixel blocks into one pixel; all events are kept.
inline EventStream downsample_sum(const EventStream& stream, int factor) {
  if (factor <= 0 || stream.width % factor != 0 || stream.height % factor != 0) {
    throw ConfigError("downsample factor must divide the sensor size");
  }
  EventStream out;
  out.width = stream.width / factor;
  out.height = stream.height / factor;
  out.skipped = stream.skipped;
  out.events.reserve(stream.events.size());
  for (Event e : stream.events) {
    e.x = static_cast<std::uint16_t>(e.x / factor);
    e.y = static_cast<std::uint16_t>(e.y / factor);
    out.events.push_back(e);
  }
  return out;
}

/// Keep the top-left width x height window.
inline EventStream crop(const EventStream& stream, int width, int height) {
  if (width <= 0 || height <= 0 || width > stream.width || height > stream.height) {
    throw ConfigError("crop window must lie inside the sensor");
  }
  EventStream out;
  out.width = width;
  out.height = height;
  out.skipped = stream.skipped;
  for (const Event& e : stream.events) {
    if (e.x < width && e.y < height) out.events.push_back(e);
  }
  return out;
}

/// Dense [T, 2, H, W] event counts. Channel 0 holds on-events, channel 1 off-events.
struct FrameSequence {
  int steps = 0;
  int height = 0;
  int width = 0;
  double dt_ms = 1.0;
  std::int64_t start_us = 0;
  std::vector<std::uint32_t> data;

  std::int64_t frame_size() const { return std::int64_t{2} * height * width; }
  const std::uint32_t* frame(int k) const { return data.data() + k * frame_size(); }
  std::uint32_t at(int k, int c, int y, int x) const {
    return data[static_cast<std::size_t>(((std::int64_t{k} * 2 + c) * height + y) * width + x)];
  }
  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto v : data) n += v;
    return n;
  }
  friend bool operator==(const FrameSequence&, const FrameSequence&) = default;
};

inline std::int64_t bin_width_us(double dt_ms) {
  const auto us = static_cast<std::int64_t>(std::llround(dt_ms * 1000.0));
  if (!(dt_ms > 0) || us < 1) throw ConfigError("bin width must be at least 1 us");
  return us;
}

/// Count events into half-open bins [start + k dt, start + (k+1) dt).
inline FrameSequence bin_to_frames(const EventStream& stream, double dt_ms, int steps,
                                   std::int64_t start_us) {
  const std::int64_t dt_us = bin_width_us(dt_ms);
  if (steps < 0) throw ConfigError("number of frames must be >= 0");
  FrameSequence f;
  f.steps = steps;
  f.height = stream.height;
  f.width = stream.width;
  f.dt_ms = dt_ms;
  f.start_us = start_us;
  f.data.assign(static_cast<std::size_t>(std::int64_t{steps} * f.frame_size()), 0);
  const std::int64_t end_us = start_us + dt_us * steps;
  auto it = std::lower_bound(stream.events.begin(), stream.events.end(), start_us,
                             [](const Event& e, std::int64_t t) { return e.t < t; });
  for (; it != stream.events.end() && it->t < end_us; ++it) {
    const std::int64_t k = (it->t - start_us) / dt_us;
    const int c = it->polarity == Polarity::on ? 0 : 1;
    ++f.data[static_cast<std::size_t>(((k * 2 + c) * f.height + it->y) * f.width + it->x)];
  }
  return f;
}

/// Uniform integer start offset (ms) such that a full slice fits in the recording.
template <typename Rng>
std::int64_t random_slice(double duration_ms, double recording_len_ms, Rng& rng) {
  if (recording_len_ms < duration_ms) {
    throw SampleTooShortError("recording of " + std::to_string(recording_len_ms) +
                              " ms is shorter than the " + std::to_string(duration_ms) + " ms slice");
  }
  const auto hi = static_cast<std::int64_t>(std::floor(recording_len_ms - duration_ms));
  return std::uniform_int_distribution<std::int64_t>(0, hi)(rng);
}

struct RegressionTask {
  Matrix<float> input;                        // [T, n_in], 0/1
  std::array<std::vector<float>, 3> targets;  // ramp, fast sinusoid, slow sinusoid
  double dt_ms = 1.0;
};

struct RegressionTargets {
  double fast_hz = 10.0;
  double slow_hz = 2.0;
};

/// Fixed Bernoulli(rate * dt) spike raster with three pseudo-targets in [0, 1].
inline RegressionTask poisson_regression_task(int n_in, double rate_hz, int steps, std::uint64_t seed,
                                              double dt_ms = 1.0, RegressionTargets shape = {}) {
  const double p = rate_hz * dt_ms * 1e-3;
  if (n_in <= 0 || steps <= 0) throw ConfigError("regression task needs n_in > 0 and T > 0");
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("rate * dt must lie in [0, 1]");
  RegressionTask task;
  task.dt_ms = dt_ms;
  task.input = Matrix<float>::Zero(steps, n_in);
  std::mt19937_64 rng(seed);
  for (Eigen::Index i = 0; i < task.input.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    task.input.data()[i] = u < p ? 1.0f : 0.0f;
  }
  for (auto& t : task.targets) t.resize(static_cast<std::size_t>(steps));
  const double two_pi = 2.0 * std::numbers::pi;
  for (int k = 0; k < steps; ++k) {
    const double sec = k * dt_ms * 1e-3;
    task.targets[0][k] = steps > 1 ? static_cast<float>(double(k) / (steps - 1)) : 0.0f;
    task.targets[1][k] = static_cast<float>(0.5 + 0.5 * std::sin(two_pi * shape.fast_hz * sec));
    task.targets[2][k] = static_cast<float>(0.5 + 0.5 * std::sin(two_pi * shape.slow_hz * sec));
  }
  return task;
}

/// One row of a dataset manifest (tab-separated, with a header line).
struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  int label = 0;
  std::string subject = "-";
  std::string light = "-";
  std::string split = "train";
};

inline constexpr std::string_view kManifestName = "manifest.tsv";

inline void write_manifest(const std::filesystem::path& dir, const std::vector<ManifestEntry>& rows) {
  std::ofstream out(dir / kManifestName);
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << "path\tlabel\tsubject\tlight\tsplit\n";
  for (const auto& r : rows) {
    out << r.path << '\t' << r.label << '\t' << r.subject << '\t' << r.light << '\t' << r.split << '\n';
  }
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw IoError("no " + std::string(kManifestName) + " in " + dir.string());
  std::vector<ManifestEntry> rows;
  std::string line;
  std::getline(in, line);
  if (line.rfind("path\tlabel", 0) != 0) throw IoError("manifest header must start with path<TAB>label");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) cols.push_back(cell);
    if (cols.size() < 2) throw IoError("manifest line " + std::to_string(lineno) + " has fewer than 2 columns");
    ManifestEntry e;
    e.path = cols[0];
    try {
      e.label = std::stoi(cols[1]);
    } catch (const std::exception&) {
      throw IoError("manifest line " + std::to_string(lineno) + ": bad label");
    }
    if (cols.size() > 2) e.subject = cols[2];
    if (cols.size() > 3) e.light = cols[3];
    if (cols.size() > 4) e.split = cols[4];
    rows.push_back(std::move(e));
  }
  return rows;
}

/// Manifest rows for an extracted N-MNIST tree (Train/<digit>/*.bin and
/// Test/<digit>/*.bin): the first `per_class` files of each digit in name
/// order, interleaved by class. Paths are absolute.
inline std::vector<ManifestEntry> index_nmnist(const std::filesystem::path& root, int train_per_class,
                                               int test_per_class) {
  namespace fs = std::filesystem;
  std::vector<ManifestEntry> rows;
  for (auto [folder, split, per_class] : {std::tuple{"Train", "train", train_per_class},
                                          std::tuple{"Test", "test", test_per_class}}) {
    std::array<std::vector<fs::path>, 10> files;
    for (int d = 0; d < 10; ++d) {
      const fs::path dir = root / folder / std::to_string(d);
      if (!fs::is_directory(dir)) throw IoError("missing N-MNIST directory " + dir.string());
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".bin") files[d].push_back(fs::absolute(e.path()));
      }
      std::sort(files[d].begin(), files[d].end());
      if (static_cast<int>(files[d].size()) < per_class) {
        throw IoError(dir.string() + " has fewer than " + std::to_string(per_class) + " recordings");
      }
    }
    for (int i = 0; i < per_class; ++i) {
      for (int d = 0; d < 10; ++d) {
        ManifestEntry e;
        e.path = files[d][i].string();
        e.label = d;
        e.light = "nmnist";
        e.split = split;
        rows.push_back(e);
      }
    }
  }
  return rows;
}

}  // namespace decolle
