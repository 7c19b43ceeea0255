#pragma once

// Discrete-time spike response model: one layer of leaky integrate-and-fire
// neurons driven through membrane (P) and synaptic (Q) traces of its inputs,
// with a refractory trace (R) of its own output.

#include "decolle/errors.hpp"
#include "decolle/tensor.hpp"

#include <cmath>

namespace decolle {

struct DecayConstants {
  double alpha = 0;  // membrane decay per step
  double beta = 0;   // synaptic decay per step
  double gamma = 0;  // refractory decay per step
  double dt = 1;     // ms
  double tau_mem = 10;
  double tau_syn = 5;
  double tau_ref = 10;
};

inline DecayConstants make_decay_constants(double dt, double tau_mem, double tau_syn,
                                           double tau_ref) {
  if (!(dt > 0) || !(tau_mem > 0) || !(tau_syn > 0) || !(tau_ref > 0)) {
    throw ConfigError("decay constants need dt > 0 and positive time constants");
  }
  DecayConstants k;
  k.dt = dt;
  k.tau_mem = tau_mem;
  k.tau_syn = tau_syn;
  k.tau_ref = tau_ref;
  k.alpha = std::exp(-dt / tau_mem);
  k.beta = std::exp(-dt / tau_syn);
  k.gamma = std::exp(-dt / tau_ref);
  return k;
}

/// Pseudo-derivative of the spike threshold. Only the boxcar is supported.
struct SurrogateSpec {
  enum class Kind { boxcar };
  Kind kind = Kind::boxcar;
  double half_width = 0.5;
};

/// Dynamical variables of one layer for a minibatch.
///
/// P and Q hold one trace per presynaptic input (not per synapse), R, U and S
/// one value per output neuron.
template <typename T>
struct LayerState {
  Matrix<T> P;  // [batch, n_in]
  Matrix<T> Q;  // [batch, n_in]
  Matrix<T> R;  // [batch, n_out]
  Matrix<T> U;  // [batch, n_out]
  Matrix<T> S;  // [batch, n_out], exactly 0 or 1

  LayerState() = default;
  LayerState(Eigen::Index batch, Eigen::Index n_in, Eigen::Index n_out)
      : P(Matrix<T>::Zero(batch, n_in)),
        Q(Matrix<T>::Zero(batch, n_in)),
        R(Matrix<T>::Zero(batch, n_out)),
        U(Matrix<T>::Zero(batch, n_out)),
        S(Matrix<T>::Zero(batch, n_out)) {}

  Eigen::Index batch() const { return P.rows(); }
  Eigen::Index n_in() const { return P.cols(); }
  Eigen::Index n_out() const { return R.cols(); }

  void reset() {
    P.setZero();
    Q.setZero();
    R.setZero();
    U.setZero();
    S.setZero();
  }
};

/// In-place trace update. P uses the pre-update Q; R is driven by the layer's
/// own spikes `state.S` of the current step.
template <typename T, typename Input>
void advance_traces(LayerState<T>& state, const Eigen::MatrixBase<Input>& input,
                    const DecayConstants& k) {
  require_shape(input.rows() == state.batch() && input.cols() == state.n_in(),
                "step_traces: input does not match state");
  const T a = static_cast<T>(k.alpha);
  const T b = static_cast<T>(k.beta);
  const T g = static_cast<T>(k.gamma);
  state.P = a * state.P + (T(1) - a) * state.Q;
  state.Q = b * state.Q + (T(1) - b) * input.template cast<T>();
  state.R = g * state.R + (T(1) - g) * state.S;
}

template <typename T, typename Input>
LayerState<T> step_traces(LayerState<T> state, const Eigen::MatrixBase<Input>& input,
                          const DecayConstants& k) {
  advance_traces(state, input, k);
  return state;
}

/// Dense membrane potential U = P W^T - rho R + b. Does not touch `state`.
template <typename T>
Matrix<T> membrane(const LayerState<T>& state, const Matrix<T>& W, const Vector<T>& b,
                   T rho) {
  require_shape(W.cols() == state.n_in() && W.rows() == state.n_out() &&
                    b.size() == state.n_out(),
                "membrane: parameter shapes do not match state");
  Matrix<T> U = state.P * W.transpose() - rho * state.R;
  U.rowwise() += b.transpose();
  return U;
}

/// Unit step: 1 for U >= 0, else 0.
template <typename Derived>
Matrix<typename Derived::Scalar> threshold(const Eigen::MatrixBase<Derived>& U) {
  using T = typename Derived::Scalar;
  return (U.array() >= T(0)).template cast<T>().matrix();
}

/// Boxcar, 1 on the closed interval [-half_width, half_width].
template <typename Derived>
Matrix<typename Derived::Scalar> surrogate_derivative(const Eigen::MatrixBase<Derived>& U,
                                                      const SurrogateSpec& spec) {
  using T = typename Derived::Scalar;
  return (U.array().abs() <= static_cast<T>(spec.half_width)).template cast<T>().matrix();
}

}  // namespace decolle
