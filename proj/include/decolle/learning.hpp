#pragma once

// Local losses and the per-timestep weight update.
//
// For layer l with readout Y = G (mask * S) / (1-p) and pseudo-target Yhat,
// the update of W_ij is   error_i * sigma'(U_i) * P_j   where
//   error = F^T loss'(Y - Yhat) * mask / (1-p),  F = H (sign-concordant) or G.
// Membrane regularisers add dL_reg/dU_i * P_j without the surrogate gate.
// Conv layers correlate the same per-unit modulator with the unfolded traces,
// after routing each pooled unit back to its argmax position.

#include "decolle/dynamics.hpp"
#include "decolle/errors.hpp"
#include "decolle/network.hpp"
#include "decolle/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace decolle {

struct LossSpec {
  enum class Kind { mse, smooth_l1 };
  Kind kind = Kind::smooth_l1;
  double smooth_l1_delta = 1.0;
};

struct RegularizerSpec {
  double lambda1 = 0.05;
  double lambda2 = 0.05;
  double u_margin = 0.01;
  double rate_floor = 0.1;
};

inline void validate(const LossSpec& s) {
  if (!(s.smooth_l1_delta > 0)) throw ConfigError("smooth_l1 delta must be > 0");
}

inline void validate(const RegularizerSpec& s) {
  if (!(s.lambda1 >= 0) || !(s.lambda2 >= 0)) throw ConfigError("regularizer coefficients must be >= 0");
}

template <typename T>
T loss_value(T r, const LossSpec& spec) {
  if (spec.kind == LossSpec::Kind::mse) return T(0.5) * r * r;
  const T d = static_cast<T>(spec.smooth_l1_delta);
  const T a = std::abs(r);
  return a < d ? T(0.5) * r * r / d : a - T(0.5) * d;
}

template <typename T>
T loss_derivative(T r, const LossSpec& spec) {
  if (spec.kind == LossSpec::Kind::mse) return r;
  const T d = static_cast<T>(spec.smooth_l1_delta);
  return std::clamp(r / d, T(-1), T(1));
}

/// Per-sample loss summed over readout units, averaged over the batch.
template <typename T>
double readout_loss(const Matrix<T>& Y, const Matrix<T>& Y_hat, const LossSpec& spec) {
  require_shape(Y.rows() == Y_hat.rows() && Y.cols() == Y_hat.cols(), "readout_loss: shape mismatch");
  double total = 0;
  for (Eigen::Index i = 0; i < Y.size(); ++i) total += loss_value(Y.data()[i] - Y_hat.data()[i], spec);
  return total / static_cast<double>(Y.rows());
}

/// Backpropagated residual through the readout: loss'(Y - Yhat) F, [batch, n_out].
template <typename T>
Matrix<T> local_error(const Matrix<T>& feedback, const Matrix<T>& Y, const Matrix<T>& Y_hat,
                      const LossSpec& spec) {
  require_shape(Y.rows() == Y_hat.rows() && Y.cols() == Y_hat.cols() && Y.cols() == feedback.rows(),
                "local_error: readout length mismatch");
  Matrix<T> d = (Y - Y_hat).unaryExpr([&](T r) { return loss_derivative(r, spec); });
  return d * feedback;
}

/// Regulariser value per sample, averaged over the batch.
template <typename T>
double regularizer_value(const Matrix<T>& U, const RegularizerSpec& spec) {
  double total = 0;
  const double n = static_cast<double>(U.cols());
  for (Eigen::Index s = 0; s < U.rows(); ++s) {
    double rect = 0, mean = 0;
    for (Eigen::Index i = 0; i < U.cols(); ++i) {
      const double u = U(s, i);
      rect += std::max(0.0, u + spec.u_margin);
      mean += u;
    }
    total += spec.lambda1 * rect / n + spec.lambda2 * std::max(0.0, spec.rate_floor - mean / n);
  }
  return total / static_cast<double>(U.rows());
}

/// dL_reg/dU for lambda1 <[U + margin]^+> + lambda2 [floor - <U>]^+, per sample.
template <typename T>
void regularizer_gradient_into(const Matrix<T>& U, const RegularizerSpec& spec, Matrix<T>& out) {
  out.resize(U.rows(), U.cols());
  const T n = static_cast<T>(U.cols());
  const T l1 = static_cast<T>(spec.lambda1) / n;
  const T l2 = static_cast<T>(spec.lambda2) / n;
  const T margin = static_cast<T>(spec.u_margin);
  for (Eigen::Index s = 0; s < U.rows(); ++s) {
    const T mean = U.row(s).mean();
    const T floor_term = (static_cast<T>(spec.rate_floor) - mean) > T(0) ? -l2 : T(0);
    for (Eigen::Index i = 0; i < U.cols(); ++i) {
      out(s, i) = (U(s, i) + margin > T(0) ? l1 : T(0)) + floor_term;
    }
  }
}

template <typename T>
Matrix<T> regularizer_gradient(const Matrix<T>& U, const RegularizerSpec& spec) {
  Matrix<T> out;
  regularizer_gradient_into(U, spec, out);
  return out;
}

template <typename T>
struct Gradients {
  Matrix<T> dW;
  Vector<T> db;
};

/// Dense closed-form update: dW = (error * sigma'(U))^T P / batch, db = mean(error * sigma'(U)).
template <typename T>
Gradients<T> decolle_update(const Matrix<T>& error, const Matrix<T>& U, const Matrix<T>& P,
                            const SurrogateSpec& spec) {
  require_shape(error.rows() == U.rows() && error.cols() == U.cols() && P.rows() == U.rows(),
                "decolle_update: shape mismatch");
  const Matrix<T> m = error.cwiseProduct(surrogate_derivative(U, spec));
  const T inv_b = T(1) / static_cast<T>(U.rows());
  Gradients<T> g;
  g.dW = inv_b * (m.transpose() * P);
  g.db = inv_b * m.colwise().sum().transpose();
  return g;
}

/// Gradient of one layer from its per-unit modulator dL/dU, [batch, n_out].
/// Dense layers use the traces directly; conv layers use the unfolded traces
/// and pooling routes left in `ws` by compute_membrane.
template <typename T>
void layer_gradient(const LayerParams<T>& params, const LayerState<T>& state,
                    const LayerWorkspace<T>& ws, const Matrix<T>& modulator, Matrix<T>& routed,
                    Gradients<T>& out) {
  const LayerGeometry& g = params.geom;
  const Eigen::Index batch = modulator.rows();
  const T inv_b = T(1) / static_cast<T>(batch);
  if (g.kind == LayerKind::dense) {
    out.dW.noalias() = modulator.transpose() * state.P;
    out.dW *= inv_b;
    out.db.noalias() = modulator.colwise().sum().transpose();
    out.db *= inv_b;
    return;
  }
  out.dW.setZero();
  out.db.setZero();
  const std::int64_t plane = std::int64_t{g.out.height} * g.out.width;
  routed.resize(g.out.channels, Eigen::Index{g.conv_out.height} * g.conv_out.width);
  for (Eigen::Index s = 0; s < batch; ++s) {
    const T* m = modulator.row(s).data();
    bool any = false;
    for (std::int64_t j = 0; j < g.n_out() && !any; ++j) any = m[j] != T(0);
    if (!any) continue;
    routed.setZero();
    const std::int32_t* route = ws.argmax.data() + s * g.n_out();
    for (std::int64_t j = 0; j < g.n_out(); ++j) {
      if (m[j] != T(0)) routed.data()[route[j]] += m[j];
    }
    out.dW.noalias() += routed * ws.cols[s].transpose();
    for (int c = 0; c < g.out.channels; ++c) {
      T acc = 0;
      for (std::int64_t j = 0; j < plane; ++j) acc += m[c * plane + j];
      out.db[c] += acc;
    }
  }
  out.dW *= inv_b;
  out.db *= inv_b;
}

struct AdaMaxConfig {
  double lr = 1e-9;
  double beta1 = 0.0;
  double beta2 = 0.95;
  double eps = 1e-8;
};

inline void validate(const AdaMaxConfig& c) {
  if (!(c.lr >= 0)) throw ConfigError("learning rate must be >= 0");
  if (!(c.beta1 >= 0 && c.beta1 < 1)) throw ConfigError("adamax beta1 must be in [0,1)");
  if (!(c.beta2 >= 0 && c.beta2 < 1)) throw ConfigError("adamax beta2 must be in [0,1)");
  if (!(c.eps > 0)) throw ConfigError("adamax eps must be > 0");
}

template <typename T>
struct AdaMaxState {
  std::vector<T> m;
  std::vector<T> u;
  std::int64_t t = 0;

  AdaMaxState() = default;
  explicit AdaMaxState(std::size_t n) : m(n, T(0)), u(n, T(0)) {}
};

/// m <- b1 m + (1-b1) g;  u <- max(b2 u, |g|);  p <- p - lr/(1-b1^t) m/(u+eps).
template <typename T>
void adamax_step(AdaMaxState<T>& state, std::span<const T> grad, std::span<T> param,
                 const AdaMaxConfig& cfg, double lr) {
  require_shape(grad.size() == param.size() && state.m.size() == param.size(),
                "adamax_step: shape mismatch");
  ++state.t;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.eps);
  const T step = static_cast<T>(lr / (1.0 - std::pow(cfg.beta1, static_cast<double>(state.t))));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.u[i] = std::max(b2 * state.u[i], std::abs(g));
    param[i] -= step * state.m[i] / (state.u[i] + eps);
  }
}

struct LrSchedule {
  double divisor = 5.0;
  std::int64_t interval_steps = 500;
};

inline void validate(const LrSchedule& s) {
  if (!(s.divisor > 1)) throw ConfigError("lr schedule divisor must be > 1");
  if (s.interval_steps <= 0) throw ConfigError("lr schedule interval must be > 0");
}

inline double schedule_lr(double base_lr, std::int64_t step, const LrSchedule& sched) {
  if (step < 0) throw ConfigError("schedule step must be >= 0");
  return base_lr / std::pow(sched.divisor, static_cast<double>(step / sched.interval_steps));
}

struct LearningConfig {
  LossSpec loss;
  RegularizerSpec regularizer;
  SurrogateSpec surrogate;
  bool sign_concordant = true;
  AdaMaxConfig optimizer;
};

struct LayerLoss {
  double task = 0;
  double regularizer = 0;
};

/// Per-layer gradient buffers and optimizer state, allocated once.
template <typename T>
class Learner {
 public:
  Learner(const Network<T>& net, LearningConfig cfg) : cfg_(cfg) {
    validate(cfg_.loss);
    validate(cfg_.regularizer);
    validate(cfg_.optimizer);
    for (std::size_t l = 0; l < net.size(); ++l) {
      const auto& p = net.layers()[l];
      Buffers b;
      b.dloss = Matrix<T>::Zero(net.batch(), p.geom.readout);
      b.error = Matrix<T>::Zero(net.batch(), p.geom.n_out());
      b.reg = Matrix<T>::Zero(net.batch(), p.geom.n_out());
      b.modulator = Matrix<T>::Zero(net.batch(), p.geom.n_out());
      b.grads.dW = Matrix<T>::Zero(p.W.rows(), p.W.cols());
      b.grads.db = Vector<T>::Zero(p.b.size());
      if (p.geom.kind == LayerKind::conv) {
        b.routed = Matrix<T>::Zero(p.geom.out.channels,
                                   Eigen::Index{p.geom.conv_out.height} * p.geom.conv_out.width);
      }
      b.opt_W = AdaMaxState<T>(static_cast<std::size_t>(p.W.size()));
      b.opt_b = AdaMaxState<T>(static_cast<std::size_t>(p.b.size()));
      buffers_.push_back(std::move(b));
    }
  }

  const LearningConfig& config() const { return cfg_; }

  /// Local losses and gradients for every layer from the last forward().
  /// `targets[l]` is [batch, n_readout] for layer l.
  std::vector<LayerLoss> compute_gradients(const Network<T>& net, const std::vector<Matrix<T>>& targets) {
    require_shape(targets.size() == net.size(), "one target per layer is required");
    std::vector<LayerLoss> losses(net.size());
    for (std::size_t l = 0; l < net.size(); ++l) losses[l] = compute_layer_gradient(net, l, targets[l]);
    return losses;
  }

  /// Loss and gradient of a single layer; reads only layer l.
  LayerLoss compute_layer_gradient(const Network<T>& net, std::size_t l, const Matrix<T>& target) {
    const LayerParams<T>& p = net.layers()[l];
    const LayerState<T>& st = net.state(l);
    const LayerWorkspace<T>& ws = net.workspace(l);
    Buffers& b = buffers_[l];
    require_shape(target.rows() == ws.Y.rows() && target.cols() == ws.Y.cols(),
                  "target does not match readout");
    LayerLoss loss;
    loss.task = readout_loss(ws.Y, target, cfg_.loss);
    loss.regularizer = regularizer_value(st.U, cfg_.regularizer);

    for (Eigen::Index i = 0; i < b.dloss.size(); ++i) {
      b.dloss.data()[i] = loss_derivative(ws.Y.data()[i] - target.data()[i], cfg_.loss);
    }
    const Matrix<T>& feedback = cfg_.sign_concordant ? p.H : p.G;
    b.error.noalias() = b.dloss * feedback;
    const T scale = ws.readout_scale;
    const T hw = static_cast<T>(cfg_.surrogate.half_width);
    regularizer_gradient_into(st.U, cfg_.regularizer, b.reg);
    for (Eigen::Index i = 0; i < b.modulator.size(); ++i) {
      const T gate = std::abs(st.U.data()[i]) <= hw ? T(1) : T(0);
      b.modulator.data()[i] = b.error.data()[i] * ws.mask.data()[i] * scale * gate + b.reg.data()[i];
    }
    layer_gradient(p, st, ws, b.modulator, b.routed, b.grads);
    return loss;
  }

  /// AdaMax step on every layer with the gradients from compute_gradients().
  void apply(Network<T>& net, double lr) {
    for (std::size_t l = 0; l < net.size(); ++l) {
      auto& p = net.layers()[l];
      Buffers& b = buffers_[l];
      adamax_step<T>(b.opt_W, {b.grads.dW.data(), static_cast<std::size_t>(b.grads.dW.size())},
                     {p.W.data(), static_cast<std::size_t>(p.W.size())}, cfg_.optimizer, lr);
      adamax_step<T>(b.opt_b, {b.grads.db.data(), static_cast<std::size_t>(b.grads.db.size())},
                     {p.b.data(), static_cast<std::size_t>(p.b.size())}, cfg_.optimizer, lr);
    }
  }

  const Gradients<T>& gradients(std::size_t l) const { return buffers_[l].grads; }
  AdaMaxState<T>& optimizer_W(std::size_t l) { return buffers_[l].opt_W; }
  AdaMaxState<T>& optimizer_b(std::size_t l) { return buffers_[l].opt_b; }
  const AdaMaxState<T>& optimizer_W(std::size_t l) const { return buffers_[l].opt_W; }
  const AdaMaxState<T>& optimizer_b(std::size_t l) const { return buffers_[l].opt_b; }
  std::size_t size() const { return buffers_.size(); }

  /// Bytes held for learning: gradient, error and optimizer buffers.
  std::size_t buffer_bytes() const {
    std::size_t n = 0;
    for (const auto& b : buffers_) {
      n += static_cast<std::size_t>(b.dloss.size() + b.error.size() + b.reg.size() +
                                    b.modulator.size() + b.grads.dW.size() + b.grads.db.size() +
                                    b.routed.size());
      n += b.opt_W.m.size() * 2 + b.opt_b.m.size() * 2;
    }
    return n * sizeof(T);
  }

 private:
  struct Buffers {
    Matrix<T> dloss;
    Matrix<T> error;
    Matrix<T> reg;
    Matrix<T> modulator;
    Matrix<T> routed;
    Gradients<T> grads;
    AdaMaxState<T> opt_W;
    AdaMaxState<T> opt_b;
  };

  LearningConfig cfg_;
  std::vector<Buffers> buffers_;
};

}  // namespace decolle
