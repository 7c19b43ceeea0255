#pragma once

// Binary checkpoints of parameters and optimizer state. Layout (little-endian):
//
//   char[8]  "DCLLCKPT"
//   u32      version (1)
//   u32      scalar size in bytes (4 or 8)
//   u32 n, char[n]  topology signature
//   i64      minibatch step
//   u32      layer count
//   per layer: W, b, G, H as (u64 rows, u64 cols, scalar[rows*cols]),
//              then AdaMax state of W and of b as (i64 t, u64 n, scalar[n] m, scalar[n] u)
//
// Data order and dropout masks are derived from (seed, step), so no RNG
// state is stored. See docs/checkpoint.md.

#include "decolle/config.hpp"
#include "decolle/errors.hpp"
#include "decolle/learning.hpp"
#include "decolle/network.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

namespace decolle {

inline constexpr std::string_view kCheckpointMagic = "DCLLCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof(V));
  }
  void put_bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}
  template <typename V>
  V get() {
    V v;
    get_bytes(&v, sizeof(V));
    return v;
  }
  void get_bytes(void* p, std::size_t n) {
    if (in_.size() - pos_ < n) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

template <typename T, typename M>
void put_matrix(ByteWriter& w, const M& m) {
  w.put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
  w.put_bytes(m.data(), sizeof(T) * static_cast<std::size_t>(m.size()));
}

template <typename T, typename M>
void get_matrix(ByteReader& r, M& m, const char* what) {
  const auto rows = r.get<std::uint64_t>();
  const auto cols = r.get<std::uint64_t>();
  if (rows != static_cast<std::uint64_t>(m.rows()) || cols != static_cast<std::uint64_t>(m.cols())) {
    throw TopologyMismatchError(std::string("checkpoint ") + what + " shape does not match the network");
  }
  r.get_bytes(m.data(), sizeof(T) * static_cast<std::size_t>(m.size()));
}

template <typename T>
void put_adamax(ByteWriter& w, const AdaMaxState<T>& s) {
  w.put<std::int64_t>(s.t);
  w.put<std::uint64_t>(s.m.size());
  w.put_bytes(s.m.data(), sizeof(T) * s.m.size());
  w.put_bytes(s.u.data(), sizeof(T) * s.u.size());
}

template <typename T>
void get_adamax(ByteReader& r, AdaMaxState<T>& s) {
  s.t = r.get<std::int64_t>();
  const auto n = r.get<std::uint64_t>();
  if (n != s.m.size()) throw TopologyMismatchError("checkpoint optimizer state does not match the network");
  r.get_bytes(s.m.data(), sizeof(T) * s.m.size());
  r.get_bytes(s.u.data(), sizeof(T) * s.u.size());
}

}  // namespace detail

template <typename T>
std::string checkpoint_bytes(const NetworkTopology& topo, const Network<T>& net, const Learner<T>& learner,
                             std::int64_t step) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(sizeof(T));
  const std::string sig = topology_signature(topo);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sig.size()));
  w.put_bytes(sig.data(), sig.size());
  w.put<std::int64_t>(step);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(net.size()));
  for (std::size_t l = 0; l < net.size(); ++l) {
    const auto& p = net.layers()[l];
    detail::put_matrix<T>(w, p.W);
    detail::put_matrix<T>(w, p.b);
    detail::put_matrix<T>(w, p.G);
    detail::put_matrix<T>(w, p.H);
    detail::put_adamax(w, learner.optimizer_W(l));
    detail::put_adamax(w, learner.optimizer_b(l));
  }
  return w.take();
}

/// Restore parameters and optimizer state in place; returns the stored step.
template <typename T>
std::int64_t restore_checkpoint(std::string_view bytes, const NetworkTopology& topo, Network<T>& net,
                                Learner<T>& learner) {
  detail::ByteReader r(bytes);
  char magic[8];
  r.get_bytes(magic, sizeof magic);
  if (std::string_view(magic, sizeof magic) != kCheckpointMagic) throw IoError("not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto scalar = r.get<std::uint32_t>();
  if (scalar != sizeof(T)) {
    throw TopologyMismatchError("checkpoint stores " + std::to_string(scalar * 8) + "-bit parameters");
  }
  std::string sig(r.get<std::uint32_t>(), '\0');
  r.get_bytes(sig.data(), sig.size());
  const std::string expected = topology_signature(topo);
  if (sig != expected) {
    throw TopologyMismatchError("checkpoint topology '" + sig + "' does not match '" + expected + "'");
  }
  const auto step = r.get<std::int64_t>();
  const auto layers = r.get<std::uint32_t>();
  if (layers != net.size()) throw TopologyMismatchError("checkpoint layer count does not match the network");
  for (std::size_t l = 0; l < net.size(); ++l) {
    auto& p = net.layers()[l];
    detail::get_matrix<T>(r, p.W, "W");
    detail::get_matrix<T>(r, p.b, "b");
    detail::get_matrix<T>(r, p.G, "G");
    detail::get_matrix<T>(r, p.H, "H");
    detail::get_adamax(r, learner.optimizer_W(l));
    detail::get_adamax(r, learner.optimizer_b(l));
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint");
  return step;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const NetworkTopology& topo, const Network<T>& net,
                     const Learner<T>& learner, std::int64_t step) {
  const std::string bytes = checkpoint_bytes(topo, net, learner, step);
  const auto tmp = std::filesystem::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
std::int64_t load_checkpoint(const std::filesystem::path& path, const NetworkTopology& topo, Network<T>& net,
                             Learner<T>& learner) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return restore_checkpoint(bytes, topo, net, learner);
}

}  // namespace decolle
