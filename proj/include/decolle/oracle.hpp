#pragma once

// Brute-force checks of the analytic shortcuts in the engine.
//
// fd_gradient_check freezes one timestep of a single layer and compares the
// engine's weight and bias gradients with central finite differences of an
// independently written 64-bit forward pass. The spike nonlinearity is
// differentiated straight-through: S = step(U0) + s(U) - s(U0) with
// s(u) = clamp(u, -w, w) + 1/2, so the value matches the engine while the
// derivative is the boxcar. With sign-concordant feedback the readout is
// G step(U0) + H (S - step(U0)): same value, feedback H in the derivative.
//
// trace_impulse_check compares iterated traces with their closed form.
// memory_probe measures learning memory over sequences of different length.

#include "decolle/alloc_tracking.hpp"
#include "decolle/dynamics.hpp"
#include "decolle/learning.hpp"
#include "decolle/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace decolle {

struct OracleReport {
  std::string name;
  double max_rel_error = 0;
  std::string worst;  // coordinate with the largest error, e.g. "W[2,5]"
  std::int64_t n_checked = 0;
  std::int64_t n_excluded = 0;
  double tolerance = 0;
  bool pass = false;
  double forward_mismatch = 0;  // max |U_engine - U_oracle| at the base point

  double excluded_fraction() const {
    const auto total = n_checked + n_excluded;
    return total > 0 ? static_cast<double>(n_excluded) / static_cast<double>(total) : 0.0;
  }
};

struct GradCheckConfig {
  std::string name = "dense";
  Shape3 input{8, 1, 1};
  LayerSpec layer{LayerKind::dense, 4};
  int batch = 2;
  LossSpec loss{LossSpec::Kind::mse, 1.0};
  RegularizerSpec regularizer{0.0, 0.0, 0.01, 0.1};
  bool sign_concordant = false;
  double half_width = 0.5;
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
  double h = 1e-3;
  // Random frozen state: P ~ U(0, trace_scale), R ~ U(0, refractory_scale),
  // b ~ U(-bias_scale, bias_scale), targets ~ U(0, 1). W is drawn so that U
  // has a standard deviation near u_std whatever the trace scale; small traces
  // keep U insensitive to single weights and so few coordinates sit near kinks.
  double trace_scale = 0.05;
  double refractory_scale = 0.2;
  double bias_scale = 0.1;
  double u_std = 0.6;
};

namespace oracle_detail {

/// Frozen single-layer problem in plain vectors, independent of the engine layout.
struct Problem {
  LayerGeometry g;
  int batch = 0;
  std::vector<double> W, b, G, H;  // W [rows, fan_in], G/H [readout, n_out], row-major
  std::vector<std::vector<double>> P, R, target, mask;
  double scale = 1, rho = 1;
  std::vector<std::vector<double>> U0;
};

struct Eval {
  double loss = 0;
  std::vector<int> signature;
};

inline double loss_fn(double r, const LossSpec& s) {
  if (s.kind == LossSpec::Kind::mse) return 0.5 * r * r;
  const double d = s.smooth_l1_delta;
  return std::fabs(r) < d ? 0.5 * r * r / d : std::fabs(r) - 0.5 * d;
}

/// U of one sample plus the pooling argmax, by direct convolution.
inline std::vector<double> membrane(const Problem& pr, int s, std::vector<int>* route) {
  const LayerGeometry& g = pr.g;
  const auto& P = pr.P[s];
  std::vector<double> U(static_cast<std::size_t>(g.n_out()));
  if (g.kind == LayerKind::dense) {
    for (int i = 0; i < g.n_out(); ++i) {
      double acc = pr.b[i];
      for (int j = 0; j < g.n_in(); ++j) acc += pr.W[static_cast<std::size_t>(i * g.n_in() + j)] * P[j];
      U[i] = acc;
    }
  } else {
    const int k = g.kernel;
    const int H = g.conv_out.height, Wd = g.conv_out.width;
    std::vector<double> pre(static_cast<std::size_t>(g.conv_out.size()));
    for (int c = 0; c < g.out.channels; ++c) {
      for (int oy = 0; oy < H; ++oy) {
        for (int ox = 0; ox < Wd; ++ox) {
          double acc = 0;
          for (int ci = 0; ci < g.in.channels; ++ci) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * g.stride + ky - g.padding;
                const int ix = ox * g.stride + kx - g.padding;
                if (iy < 0 || ix < 0 || iy >= g.in.height || ix >= g.in.width) continue;
                acc += pr.W[static_cast<std::size_t>(c * g.fan_in() + (ci * k + ky) * k + kx)] *
                       P[static_cast<std::size_t>((ci * g.in.height + iy) * g.in.width + ix)];
              }
            }
          }
          pre[static_cast<std::size_t>((c * H + oy) * Wd + ox)] = acc;
        }
      }
    }
    const int ph = g.out.height, pw = g.out.width, q = g.pool;
    for (int c = 0; c < g.out.channels; ++c) {
      for (int py = 0; py < ph; ++py) {
        for (int px = 0; px < pw; ++px) {
          int best = (c * H + py * q) * Wd + px * q;
          for (int dy = 0; dy < q; ++dy) {
            for (int dx = 0; dx < q; ++dx) {
              const int idx = (c * H + py * q + dy) * Wd + px * q + dx;
              if (pre[idx] > pre[best]) best = idx;
            }
          }
          const int o = (c * ph + py) * pw + px;
          U[o] = pre[best] + pr.b[c];
          if (route) route->push_back(best);
        }
      }
    }
  }
  for (int i = 0; i < g.n_out(); ++i) U[i] -= pr.rho * pr.R[s][i];
  return U;
}

inline Eval evaluate(const Problem& pr, const GradCheckConfig& cfg) {
  Eval e;
  const LayerGeometry& g = pr.g;
  const double w = cfg.half_width;
  auto sigma = [w](double u) { return std::clamp(u, -w, w) + 0.5; };
  const auto& F = cfg.sign_concordant ? pr.H : pr.G;
  const auto& rs = cfg.regularizer;
  for (int s = 0; s < pr.batch; ++s) {
    std::vector<int> route;
    const auto U = membrane(pr, s, &route);
    const int n = static_cast<int>(g.n_out());
    double mean = 0;
    for (int i = 0; i < n; ++i) {
      const double u = U[i];
      e.signature.push_back(u < -w ? 0 : (u > w ? 2 : 1));
      e.signature.push_back(u + rs.u_margin > 0);
      e.loss += rs.lambda1 / n * std::max(0.0, u + rs.u_margin) / pr.batch;
      mean += u / n;
    }
    e.loss += rs.lambda2 * std::max(0.0, rs.rate_floor - mean) / pr.batch;
    e.signature.push_back(rs.rate_floor - mean > 0);
    e.signature.insert(e.signature.end(), route.begin(), route.end());
    for (int k = 0; k < g.readout; ++k) {
      double y = 0;
      for (int i = 0; i < n; ++i) {
        const double s0 = pr.U0[s][i] >= 0 ? 1.0 : 0.0;
        const double ds = sigma(U[i]) - sigma(pr.U0[s][i]);
        const std::size_t gi = static_cast<std::size_t>(k * n + i);
        y += pr.mask[s][i] * (pr.G[gi] * s0 + F[gi] * ds);
      }
      y *= pr.scale;
      const double r = y - pr.target[s][k];
      e.loss += loss_fn(r, cfg.loss) / pr.batch;
      if (cfg.loss.kind == LossSpec::Kind::smooth_l1) e.signature.push_back(std::fabs(r) < cfg.loss.smooth_l1_delta);
    }
  }
  return e;
}

inline double rel_error(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8});
}

}  // namespace oracle_detail

/// Finite-difference check of the engine's per-step gradient for one layer.
inline OracleReport fd_gradient_check(const GradCheckConfig& cfg) {
  using oracle_detail::Problem;
  OracleReport rep;
  rep.name = cfg.name;
  rep.tolerance = cfg.tolerance;

  NetworkTopology topo{cfg.input, {cfg.layer}};
  FeedbackNoiseSpec fb;  // H = G * clip(N(1, 0.5)), differs from G
  auto layers = init_params<double>(topo, cfg.seed, NeuronSpec{}, fb);
  LayerParams<double>& lp = layers[0];
  const LayerGeometry g = lp.geom;

  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double w_bound = 3.0 * cfg.u_std / (cfg.trace_scale * std::sqrt(static_cast<double>(g.fan_in())));
  for (Eigen::Index i = 0; i < lp.W.size(); ++i) lp.W.data()[i] = w_bound * (2 * unit(rng) - 1);
  for (Eigen::Index i = 0; i < lp.b.size(); ++i) lp.b[i] = cfg.bias_scale * (2 * unit(rng) - 1);

  Network<double> net(layers, cfg.batch);
  auto& st = net.state(0);
  for (Eigen::Index i = 0; i < st.P.size(); ++i) st.P.data()[i] = cfg.trace_scale * unit(rng);
  for (Eigen::Index i = 0; i < st.R.size(); ++i) st.R.data()[i] = cfg.refractory_scale * unit(rng);
  Matrix<double> target(cfg.batch, g.readout);
  for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = unit(rng);

  // engine path
  Rng dropout_rng(cfg.seed + 17);
  net.forward(dropout_rng, g.dropout > 0);
  LearningConfig lc;
  lc.loss = cfg.loss;
  lc.regularizer = cfg.regularizer;
  lc.surrogate.half_width = cfg.half_width;
  lc.sign_concordant = cfg.sign_concordant;
  Learner<double> learner(net, lc);
  learner.compute_layer_gradient(net, 0, target);
  const Gradients<double>& grad = learner.gradients(0);

  // oracle copy of the frozen problem
  Problem pr;
  pr.g = g;
  pr.batch = cfg.batch;
  pr.rho = net.layers()[0].rho;
  pr.W.assign(lp.W.data(), lp.W.data() + lp.W.size());
  pr.b.assign(lp.b.data(), lp.b.data() + lp.b.size());
  pr.G.assign(lp.G.data(), lp.G.data() + lp.G.size());
  pr.H.assign(lp.H.data(), lp.H.data() + lp.H.size());
  const auto& ws = net.workspace(0);
  pr.scale = ws.readout_scale;
  for (int s = 0; s < cfg.batch; ++s) {
    auto row = [s](const Matrix<double>& m) { return std::vector<double>(m.row(s).data(), m.row(s).data() + m.cols()); };
    pr.P.push_back(row(st.P));
    pr.R.push_back(row(st.R));
    pr.target.push_back(row(target));
    pr.mask.push_back(row(ws.mask));
  }
  for (int s = 0; s < cfg.batch; ++s) {
    pr.U0.push_back(oracle_detail::membrane(pr, s, nullptr));
    for (int i = 0; i < g.n_out(); ++i) {
      rep.forward_mismatch = std::max(rep.forward_mismatch, std::fabs(pr.U0[s][i] - st.U(s, i)));
    }
  }

  const auto base = oracle_detail::evaluate(pr, cfg).signature;
  auto check = [&](double& theta, double analytic, const std::string& id) {
    const double t0 = theta;
    theta = t0 + 2 * cfg.h;
    const auto up2 = oracle_detail::evaluate(pr, cfg).signature;
    theta = t0 - 2 * cfg.h;
    const auto dn2 = oracle_detail::evaluate(pr, cfg).signature;
    if (up2 != base || dn2 != base) {
      theta = t0;
      ++rep.n_excluded;
      return;
    }
    theta = t0 + cfg.h;
    const double lp_ = oracle_detail::evaluate(pr, cfg).loss;
    theta = t0 - cfg.h;
    const double lm = oracle_detail::evaluate(pr, cfg).loss;
    theta = t0;
    const double fd = (lp_ - lm) / (2 * cfg.h);
    const double err = oracle_detail::rel_error(analytic, fd);
    ++rep.n_checked;
    if (err > rep.max_rel_error || rep.worst.empty()) {
      rep.max_rel_error = err;
      rep.worst = id;
    }
  };
  const auto cols = static_cast<std::size_t>(g.fan_in());
  for (std::size_t i = 0; i < pr.W.size(); ++i) {
    check(pr.W[i], grad.dW.data()[i], "W[" + std::to_string(i / cols) + "," + std::to_string(i % cols) + "]");
  }
  for (std::size_t i = 0; i < pr.b.size(); ++i) check(pr.b[i], grad.db[i], "b[" + std::to_string(i) + "]");
  rep.pass = rep.n_checked > 0 && rep.max_rel_error <= rep.tolerance;
  return rep;
}

/// Configurations crossing dense/conv layers, MSE/smooth-L1 losses, the
/// regularizer on/off and random/sign-concordant feedback.
inline std::vector<GradCheckConfig> standard_gradcheck_suite() {
  using K = LossSpec::Kind;
  const RegularizerSpec off{0.0, 0.0, 0.01, 0.1};
  const RegularizerSpec on{0.05, 0.05, 0.01, 0.1};
  const LayerSpec dense{LayerKind::dense, 6, 7, 1, 2, 1, 3, 0.0};
  const LayerSpec conv{LayerKind::conv, 3, 3, 1, 1, 2, 4, 0.0};
  const Shape3 flat{10, 1, 1};
  const Shape3 image{2, 6, 6};
  struct Row {
    const char* name;
    Shape3 input;
    LayerSpec layer;
    K loss;
    bool reg;
    bool h;
    int batch;
  };
  const Row rows[] = {
      {"dense-mse-G", flat, dense, K::mse, false, false, 2},
      {"dense-sl1-reg-H", flat, dense, K::smooth_l1, true, true, 2},
      {"dense-mse-reg-G", flat, dense, K::mse, true, false, 3},
      {"dense-sl1-H", flat, dense, K::smooth_l1, false, true, 1},
      {"conv-mse-G", image, conv, K::mse, false, false, 2},
      {"conv-sl1-reg-H", image, conv, K::smooth_l1, true, true, 2},
      {"conv-mse-reg-H", image, conv, K::mse, true, true, 1},
      {"conv-sl1-G-dropout", image, conv, K::smooth_l1, false, false, 3},
  };
  std::vector<GradCheckConfig> out;
  std::uint64_t seed = 11;
  for (const Row& r : rows) {
    GradCheckConfig c;
    c.name = r.name;
    c.input = r.input;
    c.layer = r.layer;
    if (std::string(r.name).ends_with("dropout")) c.layer.dropout = 0.5;
    c.loss = LossSpec{r.loss, 0.3};
    c.regularizer = r.reg ? on : off;
    c.sign_concordant = r.h;
    c.batch = r.batch;
    c.seed = seed++;
    out.push_back(c);
  }
  return out;
}

/// P after a unit input spike absorbed into Q, then n further steps.
inline double impulse_closed_form(double alpha, double beta, int n) {
  if (n <= 0) return 0.0;
  const double c = (1 - alpha) * (1 - beta);
  if (alpha == beta) return c * n * std::pow(alpha, n - 1);
  return c * (std::pow(beta, n) - std::pow(alpha, n)) / (beta - alpha);
}

/// Iterates one input trace through the engine's update and compares every
/// step with the closed form. The error is |iterated - closed| / max(|closed|, 1).
inline OracleReport trace_impulse_check(const DecayConstants& k, int steps, double tolerance = 1e-10) {
  OracleReport rep;
  rep.name = "impulse a=" + std::to_string(k.alpha) + " b=" + std::to_string(k.beta);
  rep.tolerance = tolerance;
  LayerState<double> st(1, 1, 1);
  Matrix<double> spike = Matrix<double>::Ones(1, 1);
  Matrix<double> none = Matrix<double>::Zero(1, 1);
  advance_traces(st, spike, k);
  for (int n = 0; n <= steps; ++n) {
    const double closed = impulse_closed_form(k.alpha, k.beta, n);
    const double err = std::fabs(st.P(0, 0) - closed) / std::max(std::fabs(closed), 1.0);
    if (err > rep.max_rel_error || rep.worst.empty()) {
      rep.max_rel_error = err;
      rep.worst = "n=" + std::to_string(n);
    }
    ++rep.n_checked;
    advance_traces(st, none, k);
  }
  rep.pass = rep.max_rel_error <= tolerance;
  return rep;
}

struct MemoryProbeRow {
  int steps = 0;
  std::size_t learner_bytes = 0;    // gradient, error and optimizer buffers
  std::size_t transient_bytes = 0;  // heap peak above the pre-loop level while streaming
  std::size_t state_bytes = 0;      // P, Q, R, U, S of every layer
  std::size_t loop_allocations = 0;

  std::size_t learning_bytes() const { return learner_bytes + transient_bytes; }
};

struct MemoryProbeReport {
  std::vector<MemoryProbeRow> rows;
  bool hooks_active = false;
  double ratio = 0;  // max / min learning bytes
  bool pass = false;
  std::size_t trace_arrays = 0;      // P and Q matrices across layers
  std::size_t trace_values = 0;      // entries of every P, per sample
  std::size_t synapses = 0;          // weights across layers
};

/// Stream T steps with learning for each T and record learning memory.
/// Needs DECOLLE_INSTALL_ALLOCATION_HOOKS for the transient part.
template <typename T = float>
MemoryProbeReport memory_probe(const NetworkTopology& topo, const std::vector<int>& lengths, int batch = 1,
                               std::uint64_t seed = 1, double input_rate = 0.05) {
  MemoryProbeReport rep;
  for (int steps : lengths) {
    MemoryProbeRow row;
    row.steps = steps;
    Network<T> net(init_params<T>(topo, seed), batch);
    Learner<T> learner(net, LearningConfig{});
    std::vector<Matrix<T>> targets;
    for (const auto& p : net.layers()) targets.push_back(Matrix<T>::Constant(batch, p.geom.readout, T(0.5)));
    Matrix<T> input = Matrix<T>::Zero(batch, net.input_size());
    Rng rng(seed + 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const std::size_t before = alloc::current_bytes();
    const std::size_t count_before = alloc::allocation_count();
    alloc::reset_peak();
    for (int k = 0; k < steps; ++k) {
      for (Eigen::Index i = 0; i < input.size(); ++i) input.data()[i] = unit(rng) < input_rate ? T(1) : T(0);
      net.forward(rng, true);
      learner.compute_gradients(net, targets);
      learner.apply(net, 1e-6);
      net.advance(input);
    }
    const std::size_t peak = alloc::peak_bytes();
    row.transient_bytes = peak > before ? peak - before : 0;
    row.loop_allocations = alloc::allocation_count() - count_before;
    row.learner_bytes = learner.buffer_bytes();
    rep.trace_arrays = 0;
    rep.trace_values = 0;
    rep.synapses = 0;
    for (std::size_t l = 0; l < net.size(); ++l) {
      const auto& s = net.state(l);
      row.state_bytes += sizeof(T) * static_cast<std::size_t>(s.P.size() + s.Q.size() + s.R.size() + s.U.size() + s.S.size());
      rep.trace_arrays += 2;
      rep.trace_values += static_cast<std::size_t>(s.P.cols());
      rep.synapses += static_cast<std::size_t>(net.layers()[l].W.size());
    }
    rep.rows.push_back(row);
  }
  rep.hooks_active = alloc::hooks_active();
  std::size_t lo = ~std::size_t{0}, hi = 0;
  for (const auto& r : rep.rows) {
    lo = std::min(lo, r.learning_bytes());
    hi = std::max(hi, r.learning_bytes());
  }
  rep.ratio = lo > 0 ? static_cast<double>(hi) / static_cast<double>(lo) : 0.0;
  rep.pass = !rep.rows.empty() && lo > 0 && rep.ratio <= 1.05;
  return rep;
}

}  // namespace decolle
