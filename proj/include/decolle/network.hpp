#pragma once

// Feedforward stack of spiking layers, each with its own fixed random readout.
//
// A timestep is split in two phases so that learning can see the membrane
// potential and the traces the potential was computed from:
//   forward()  U = f(W, P) - rho R + b, S = step(U), readouts Y = G (mask * S)
//   advance()  P, Q and R move to the next step
// Layer l reads the spikes layer l-1 emitted in the same step only through
// its trace update, so layers never exchange gradients.

#include "decolle/dynamics.hpp"
#include "decolle/errors.hpp"
#include "decolle/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace decolle {

using Rng = std::mt19937_64;

enum class LayerKind { dense, conv };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  int units = 0;  // dense output size, or conv output channels
  int kernel = 7;
  int stride = 1;
  int padding = 2;
  int pool = 1;  // max-pool window and stride; 1 disables pooling
  int readout = 1;
  double dropout = 0.0;
};

struct NetworkTopology {
  Shape3 input;
  std::vector<LayerSpec> layers;
};

struct FeedbackNoiseSpec {
  double mean = 1.0;
  double std = 0.5;
  bool clip_at_zero = true;
};

struct NeuronSpec {
  DecayConstants decay = make_decay_constants(1.0, 10.0, 5.0, 10.0);
  double rho = 1.0;
};

/// Resolved shapes of one layer. For dense layers conv_out == out.
struct LayerGeometry {
  LayerKind kind = LayerKind::dense;
  Shape3 in;
  Shape3 conv_out;
  Shape3 out;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int pool = 1;
  int readout = 1;
  double dropout = 0.0;

  std::int64_t n_in() const { return in.size(); }
  std::int64_t n_out() const { return out.size(); }
  std::int64_t fan_in() const {
    return kind == LayerKind::dense ? in.size() : std::int64_t{in.channels} * kernel * kernel;
  }
  std::int64_t weight_rows() const { return kind == LayerKind::dense ? out.size() : out.channels; }
};

inline std::vector<LayerGeometry> resolve_geometry(const NetworkTopology& topo) {
  if (topo.layers.empty()) throw ConfigError("topology has no layers");
  if (topo.input.size() <= 0) throw ConfigError("topology input shape must be positive");
  std::vector<LayerGeometry> out;
  Shape3 current = topo.input;
  for (std::size_t i = 0; i < topo.layers.size(); ++i) {
    const LayerSpec& s = topo.layers[i];
    const std::string where = "layer " + std::to_string(i) + ": ";
    if (s.units <= 0) throw ConfigError(where + "units must be positive");
    if (s.readout <= 0) throw ConfigError(where + "every layer needs a readout of size >= 1");
    if (!(s.dropout >= 0.0 && s.dropout < 1.0)) throw ConfigError(where + "dropout must be in [0,1)");
    LayerGeometry g;
    g.kind = s.kind;
    g.in = current;
    g.readout = s.readout;
    g.dropout = s.dropout;
    if (s.kind == LayerKind::dense) {
      g.out = Shape3{s.units, 1, 1};
      g.conv_out = g.out;
    } else {
      if (s.kernel <= 0 || s.stride <= 0 || s.padding < 0 || s.pool <= 0) {
        throw ConfigError(where + "conv kernel, stride and pool must be positive");
      }
      g.kernel = s.kernel;
      g.stride = s.stride;
      g.padding = s.padding;
      g.pool = s.pool;
      const int ph = current.height + 2 * s.padding - s.kernel;
      const int pw = current.width + 2 * s.padding - s.kernel;
      if (ph < 0 || pw < 0) throw ConfigError(where + "kernel larger than padded input");
      g.conv_out = Shape3{s.units, ph / s.stride + 1, pw / s.stride + 1};
      g.out = Shape3{s.units, g.conv_out.height / s.pool, g.conv_out.width / s.pool};
      if (g.out.height <= 0 || g.out.width <= 0) throw ConfigError(where + "pool larger than feature map");
    }
    current = g.out;
    out.push_back(g);
  }
  return out;
}

template <typename T>
struct LayerParams {
  LayerGeometry geom;
  Matrix<T> W;  // dense [n_out, n_in]; conv [c_out, c_in * k * k]
  Vector<T> b;  // [n_out] or [c_out]
  Matrix<T> G;  // readout [n_readout, n_out], fixed
  Matrix<T> H;  // sign-concordant feedback, same shape as G, fixed
  T rho = T(1);
  DecayConstants decay;
};

/// Deterministic initialisation. Values are drawn in double precision so that
/// float and double networks built from one seed agree up to rounding.
template <typename T>
std::vector<LayerParams<T>> init_params(const NetworkTopology& topo, std::uint64_t seed,
                                        const NeuronSpec& neuron = {},
                                        const FeedbackNoiseSpec& feedback = {}) {
  if (!(feedback.std >= 0.0)) throw ConfigError("feedback noise std must be >= 0");
  const auto geoms = resolve_geometry(topo);
  Rng rng(seed);
  std::vector<LayerParams<T>> layers;
  for (const auto& g : geoms) {
    LayerParams<T> p;
    p.geom = g;
    p.rho = static_cast<T>(neuron.rho);
    p.decay = neuron.decay;

    const double w_bound = 1.0 / std::sqrt(static_cast<double>(g.fan_in()));
    std::uniform_real_distribution<double> w_dist(-w_bound, w_bound);
    p.W.resize(g.weight_rows(), g.fan_in());
    for (Eigen::Index i = 0; i < p.W.size(); ++i) p.W.data()[i] = static_cast<T>(w_dist(rng));
    p.b = Vector<T>::Zero(g.weight_rows());

    const double g_bound = 1.0 / std::sqrt(static_cast<double>(g.n_out()));
    std::uniform_real_distribution<double> g_dist(-g_bound, g_bound);
    std::normal_distribution<double> noise(feedback.mean, feedback.std);
    p.G.resize(g.readout, g.n_out());
    p.H.resize(g.readout, g.n_out());
    for (Eigen::Index i = 0; i < p.G.size(); ++i) {
      const double gv = g_dist(rng);
      double omega = feedback.std > 0 ? noise(rng) : feedback.mean;
      if (feedback.clip_at_zero && omega < 0) omega = 0;
      p.G.data()[i] = static_cast<T>(gv);
      p.H.data()[i] = static_cast<T>(gv * omega);
    }
    layers.push_back(std::move(p));
  }
  return layers;
}

/// Unfold one [c, h, w] sample into columns [c * k * k, out_h * out_w].
template <typename T>
void im2col(const T* in, const Shape3& in_shape, int kernel, int stride, int padding,
            const Shape3& out_shape, Matrix<T>& cols) {
  const int oh = out_shape.height;
  const int ow = out_shape.width;
  cols.resize(Eigen::Index{in_shape.channels} * kernel * kernel, Eigen::Index{oh} * ow);
  for (int c = 0; c < in_shape.channels; ++c) {
    const T* plane = in + std::int64_t{c} * in_shape.height * in_shape.width;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        T* row = cols.row((Eigen::Index{c} * kernel + ky) * kernel + kx).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - padding;
          T* dst = row + std::int64_t{oy} * ow;
          if (iy < 0 || iy >= in_shape.height) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = plane + std::int64_t{iy} * in_shape.width;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - padding;
            dst[ox] = (ix >= 0 && ix < in_shape.width) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

/// Max-pool over non-overlapping windows. Ties resolve to the first index in
/// row-major window order. `argmax` receives flat indices into `pre`.
template <typename T>
void max_pool(const T* pre, const Shape3& conv_out, int pool, T* out, std::int32_t* argmax) {
  const int ph = conv_out.height / pool;
  const int pw = conv_out.width / pool;
  for (int c = 0; c < conv_out.channels; ++c) {
    const std::int64_t base = std::int64_t{c} * conv_out.height * conv_out.width;
    for (int py = 0; py < ph; ++py) {
      for (int px = 0; px < pw; ++px) {
        std::int64_t best = base + std::int64_t{py * pool} * conv_out.width + px * pool;
        for (int dy = 0; dy < pool; ++dy) {
          for (int dx = 0; dx < pool; ++dx) {
            const std::int64_t idx =
                base + std::int64_t{py * pool + dy} * conv_out.width + px * pool + dx;
            if (pre[idx] > pre[best]) best = idx;
          }
        }
        const std::int64_t o = (std::int64_t{c} * ph + py) * pw + px;
        out[o] = pre[best];
        argmax[o] = static_cast<std::int32_t>(best);
      }
    }
  }
}

/// Scratch buffers for one layer, sized once for a batch.
template <typename T>
struct LayerWorkspace {
  std::vector<Matrix<T>> cols;       // conv only, per sample: unfolded P
  Matrix<T> pre;                     // conv pre-activation of the current sample
  std::vector<std::int32_t> argmax;  // [batch * n_out] into the conv_out map
  Matrix<T> mask;                    // dropout mask [batch, n_out]
  Matrix<T> Y;                       // readout [batch, n_readout]
  T readout_scale = T(1);            // 1/(1-p) when dropout is active

  LayerWorkspace() = default;
  LayerWorkspace(const LayerGeometry& g, Eigen::Index batch) {
    if (g.kind == LayerKind::conv) {
      cols.assign(batch, Matrix<T>::Zero(g.fan_in(), g.conv_out.height * g.conv_out.width));
      pre = Matrix<T>::Zero(g.out.channels, g.conv_out.height * g.conv_out.width);
    }
    argmax.assign(static_cast<std::size_t>(batch * g.n_out()), 0);
    mask = Matrix<T>::Ones(batch, g.n_out());
    Y = Matrix<T>::Zero(batch, g.readout);
  }
};

/// Bernoulli(1-p) keep-mask, written in place.
template <typename T>
void fill_dropout_mask(Matrix<T>& mask, double p, Rng& rng) {
  if (p <= 0.0) {
    mask.setOnes();
    return;
  }
  const double keep = 1.0 - p;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    mask.data()[i] = u < keep ? T(1) : T(0);
  }
}

template <typename T>
Matrix<T> make_dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0,1)");
  Matrix<T> mask(rows, cols);
  fill_dropout_mask(mask, p, rng);
  return mask;
}

/// Y = G (mask * S) / (1 - p).
template <typename T>
Matrix<T> local_readout(const LayerParams<T>& params, const Matrix<T>& spikes,
                        const Matrix<T>& mask, double p) {
  require_shape(spikes.cols() == params.G.cols() && mask.rows() == spikes.rows() &&
                    mask.cols() == spikes.cols(),
                "local_readout: spikes/mask do not match readout");
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  return scale * (spikes.cwiseProduct(mask) * params.G.transpose());
}

/// Membrane potential of one layer from its current traces. Fills state.U and,
/// for conv layers, the unfolded traces and pooling routes in `ws`.
template <typename T>
void compute_membrane(const LayerParams<T>& params, LayerState<T>& state, LayerWorkspace<T>& ws) {
  const LayerGeometry& g = params.geom;
  require_shape(state.n_in() == g.n_in() && state.n_out() == g.n_out(),
                "compute_membrane: state does not match layer");
  if (g.kind == LayerKind::dense) {
    state.U.noalias() = state.P * params.W.transpose();
    state.U.rowwise() += params.b.transpose();
  } else {
    const std::int64_t plane = std::int64_t{g.out.height} * g.out.width;
    for (Eigen::Index s = 0; s < state.batch(); ++s) {
      Matrix<T>& cols = ws.cols[s];
      im2col(state.P.row(s).data(), g.in, g.kernel, g.stride, g.padding, g.conv_out, cols);
      ws.pre.noalias() = params.W * cols;
      T* u = state.U.row(s).data();
      std::int32_t* route = ws.argmax.data() + s * g.n_out();
      if (g.pool == 1) {
        std::copy(ws.pre.data(), ws.pre.data() + ws.pre.size(), u);
        for (std::int64_t j = 0; j < g.n_out(); ++j) route[j] = static_cast<std::int32_t>(j);
      } else {
        max_pool(ws.pre.data(), g.conv_out, g.pool, u, route);
      }
      for (int c = 0; c < g.out.channels; ++c) {
        T* row = u + c * plane;
        for (std::int64_t j = 0; j < plane; ++j) row[j] += params.b[c];
      }
    }
  }
  state.U -= params.rho * state.R;
}

/// Membrane, spikes and trace update for one layer; the learning-free path.
template <typename T, typename Input>
void layer_forward(const LayerParams<T>& params, LayerState<T>& state,
                   const Eigen::MatrixBase<Input>& input, LayerWorkspace<T>& ws) {
  compute_membrane(params, state, ws);
  state.S = threshold(state.U);
  advance_traces(state, input, params.decay);
}

template <typename T>
class Network {
 public:
  Network(std::vector<LayerParams<T>> layers, Eigen::Index batch)
      : layers_(std::move(layers)), batch_(batch) {
    if (batch < 1) throw ConfigError("batch size must be >= 1");
    for (const auto& p : layers_) {
      states_.emplace_back(batch, p.geom.n_in(), p.geom.n_out());
      workspaces_.emplace_back(p.geom, batch);
    }
  }

  std::size_t size() const { return layers_.size(); }
  Eigen::Index batch() const { return batch_; }
  Eigen::Index input_size() const { return layers_.front().geom.n_in(); }

  std::vector<LayerParams<T>>& layers() { return layers_; }
  const std::vector<LayerParams<T>>& layers() const { return layers_; }
  LayerState<T>& state(std::size_t l) { return states_[l]; }
  const LayerState<T>& state(std::size_t l) const { return states_[l]; }
  LayerWorkspace<T>& workspace(std::size_t l) { return workspaces_[l]; }
  const LayerWorkspace<T>& workspace(std::size_t l) const { return workspaces_[l]; }
  const Matrix<T>& readout(std::size_t l) const { return workspaces_[l].Y; }
  const Matrix<T>& spikes(std::size_t l) const { return states_[l].S; }

  void reset_state() {
    for (auto& s : states_) s.reset();
  }

  /// Membranes, spikes, fresh dropout masks and readouts for every layer.
  /// With `dropout_active == false` masks are all ones and no scaling applies.
  void forward(Rng& dropout_rng, bool dropout_active = true) {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const LayerParams<T>& p = layers_[l];
      LayerState<T>& st = states_[l];
      LayerWorkspace<T>& ws = workspaces_[l];
      compute_membrane(p, st, ws);
      st.S = (st.U.array() >= T(0)).template cast<T>().matrix();
      const bool drop = dropout_active && p.geom.dropout > 0.0;
      if (drop) {
        fill_dropout_mask(ws.mask, p.geom.dropout, dropout_rng);
        ws.readout_scale = static_cast<T>(1.0 / (1.0 - p.geom.dropout));
        ws.Y.noalias() = st.S.cwiseProduct(ws.mask) * p.G.transpose();
        ws.Y *= ws.readout_scale;
      } else {
        ws.mask.setOnes();
        ws.readout_scale = T(1);
        ws.Y.noalias() = st.S * p.G.transpose();
      }
    }
  }

  /// Trace update of every layer; layer l is driven by layer l-1's spikes.
  template <typename Input>
  void advance(const Eigen::MatrixBase<Input>& input) {
    require_shape(input.rows() == batch_ && input.cols() == input_size(),
                  "network input does not match the first layer");
    advance_traces(states_[0], input, layers_[0].decay);
    for (std::size_t l = 1; l < layers_.size(); ++l) {
      advance_traces(states_[l], states_[l - 1].S, layers_[l].decay);
    }
  }

  template <typename Input>
  void step(const Eigen::MatrixBase<Input>& input, Rng& dropout_rng, bool dropout_active = true) {
    forward(dropout_rng, dropout_active);
    advance(input);
  }

 private:
  std::vector<LayerParams<T>> layers_;
  Eigen::Index batch_;
  std::vector<LayerState<T>> states_;
  std::vector<LayerWorkspace<T>> workspaces_;
};

}  // namespace decolle
