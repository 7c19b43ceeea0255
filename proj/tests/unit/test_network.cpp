#include "decolle/learning.hpp"
#include "decolle/network.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace decolle;

namespace {

NetworkTopology dense_topo(std::vector<int> units, int n_in = 6, int readout = 3) {
  NetworkTopology t;
  t.input = Shape3{n_in, 1, 1};
  for (int u : units) t.layers.push_back({LayerKind::dense, u, 7, 1, 2, 1, readout, 0.0});
  return t;
}

NetworkTopology table2_topo() {
  NetworkTopology t;
  t.input = Shape3{2, 32, 32};
  t.layers = {{LayerKind::conv, 64, 7, 1, 2, 2, 11, 0.5},
              {LayerKind::conv, 128, 7, 1, 2, 1, 11, 0.5},
              {LayerKind::conv, 128, 7, 1, 2, 2, 11, 0.5}};
  return t;
}

Matrix<float> poisson(Eigen::Index rows, Eigen::Index cols, Rng& rng, double p) {
  Matrix<float> m(rows, cols);
  std::bernoulli_distribution b(p);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = b(rng) ? 1.0f : 0.0f;
  return m;
}

double checksum(const Matrix<float>& m) {
  double s = 0;
  for (Eigen::Index i = 0; i < m.size(); ++i) s += m.data()[i] * static_cast<double>(i % 97 + 1);
  return s;
}

}  // namespace

TEST(Geometry, Table2DimensionChain) {
  const auto g = resolve_geometry(table2_topo());
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0].conv_out, (Shape3{64, 30, 30}));
  EXPECT_EQ(g[0].out, (Shape3{64, 15, 15}));
  EXPECT_EQ(g[1].out, (Shape3{128, 13, 13}));
  EXPECT_EQ(g[2].conv_out, (Shape3{128, 11, 11}));
  EXPECT_EQ(g[2].out, (Shape3{128, 5, 5}));
  EXPECT_EQ(g[0].fan_in(), 2 * 49);
  EXPECT_EQ(g[1].fan_in(), 64 * 49);
}

TEST(Geometry, RejectsBadTopologies) {
  NetworkTopology empty;
  empty.input = Shape3{4, 1, 1};
  EXPECT_THROW(resolve_geometry(empty), ConfigError);
  auto t = dense_topo({4});
  t.layers[0].readout = 0;
  EXPECT_THROW(resolve_geometry(t), ConfigError);
  t = dense_topo({4});
  t.layers[0].dropout = 1.0;
  EXPECT_THROW(resolve_geometry(t), ConfigError);
  NetworkTopology c;
  c.input = Shape3{1, 4, 4};
  c.layers = {{LayerKind::conv, 2, 7, 1, 0, 1, 1, 0.0}};
  EXPECT_THROW(resolve_geometry(c), ConfigError);
  c.layers = {{LayerKind::conv, 2, 3, 1, 0, 4, 1, 0.0}};
  EXPECT_THROW(resolve_geometry(c), ConfigError);
}

TEST(InitParams, DeterministicAndWithinBounds) {
  const auto t = table2_topo();
  const auto a = init_params<float>(t, 7);
  const auto b = init_params<float>(t, 7);
  const auto c = init_params<float>(t, 8);
  for (std::size_t l = 0; l < a.size(); ++l) {
    EXPECT_EQ(a[l].W, b[l].W);
    EXPECT_EQ(a[l].G, b[l].G);
    EXPECT_EQ(a[l].H, b[l].H);
    EXPECT_NE(a[l].W, c[l].W);
    const double wb = 1.0 / std::sqrt(static_cast<double>(a[l].geom.fan_in()));
    const double gb = 1.0 / std::sqrt(static_cast<double>(a[l].geom.n_out()));
    EXPECT_LE(a[l].W.cwiseAbs().maxCoeff(), wb);
    EXPECT_LE(a[l].G.cwiseAbs().maxCoeff(), gb);
    EXPECT_EQ(a[l].b.cwiseAbs().sum(), 0.0f);
    EXPECT_EQ(a[l].G.rows(), 11);
    EXPECT_EQ(a[l].G.cols(), a[l].geom.n_out());
  }
}

TEST(InitParams, FeedbackIsSignConcordantWithClippedZeros) {
  const auto p = init_params<double>(dense_topo({200}, 10, 50), 3);
  const auto& G = p[0].G;
  const auto& H = p[0].H;
  int zeros = 0;
  for (Eigen::Index i = 0; i < G.size(); ++i) {
    if (H.data()[i] == 0.0) {
      ++zeros;
      continue;
    }
    ASSERT_GT(H.data()[i] * G.data()[i], 0.0);
  }
  // P(N(1, 0.5) < 0) = Phi(-2) ~ 2.3%
  const double frac = static_cast<double>(zeros) / static_cast<double>(G.size());
  EXPECT_NEAR(frac, 0.02275, 0.006);
  EXPECT_NE(G, H);
}

TEST(InitParams, ZeroNoiseGivesIdenticalFeedback) {
  FeedbackNoiseSpec fb;
  fb.std = 0.0;
  const auto p = init_params<double>(dense_topo({5}), 3, NeuronSpec{}, fb);
  EXPECT_EQ(p[0].G, p[0].H);
}

TEST(Dropout, MaskStatistics) {
  Rng rng(1);
  const auto m = make_dropout_mask<float>(1000, 1000, 0.5, rng);
  EXPECT_NEAR(m.mean(), 0.5, 0.002);
  for (Eigen::Index i = 0; i < m.size(); ++i) ASSERT_TRUE(m.data()[i] == 0.0f || m.data()[i] == 1.0f);
  Rng r2(1);
  EXPECT_EQ(m, make_dropout_mask<float>(1000, 1000, 0.5, r2));
  Rng r3(1);
  EXPECT_EQ(make_dropout_mask<float>(10, 10, 0.0, r3), Matrix<float>::Ones(10, 10));
  EXPECT_THROW(make_dropout_mask<float>(2, 2, 1.0, r3), ConfigError);
  EXPECT_THROW(make_dropout_mask<float>(2, 2, -0.1, r3), ConfigError);
}

TEST(Readout, LinearExamples) {
  const auto p = init_params<double>(dense_topo({4}, 3, 2), 1);
  const Matrix<double> zeros = Matrix<double>::Zero(1, 4);
  const Matrix<double> ones = Matrix<double>::Ones(1, 4);
  EXPECT_EQ(local_readout(p[0], zeros, ones, 0.0).cwiseAbs().sum(), 0.0);
  Matrix<double> onehot = Matrix<double>::Zero(1, 4);
  onehot(0, 2) = 1;
  EXPECT_EQ(local_readout(p[0], onehot, ones, 0.0).transpose(), p[0].G.col(2));
  EXPECT_EQ(local_readout(p[0], ones, zeros, 0.5).cwiseAbs().sum(), 0.0);
  EXPECT_TRUE(local_readout(p[0], onehot, ones, 0.5).transpose().isApprox(2.0 * p[0].G.col(2)));
}

TEST(LayerForward, ThresholdAtZeroFiresAndNegativeBiasSilences) {
  auto p = init_params<float>(dense_topo({5}), 1);
  LayerState<float> s(2, 6, 5);
  LayerWorkspace<float> ws(p[0].geom, 2);
  // U = 0 sits on the threshold, which fires
  layer_forward(p[0], s, Matrix<float>::Zero(2, 6), ws);
  EXPECT_EQ(s.S.sum(), 10.0f);
  s.reset();
  p[0].b.setConstant(-0.1f);
  layer_forward(p[0], s, Matrix<float>::Zero(2, 6), ws);
  EXPECT_EQ(s.S.sum(), 0.0f);
}

TEST(LayerForward, StrongSynapseFiresAfterInputSpike) {
  NetworkTopology t = dense_topo({1}, 1, 1);
  auto p = init_params<double>(t, 1);
  p[0].W(0, 0) = 40.0;
  p[0].b(0) = -0.5;
  LayerState<double> s(1, 1, 1);
  LayerWorkspace<double> ws(p[0].geom, 1);
  int first = -1;
  for (int k = 0; k < 6; ++k) {
    const Matrix<double> x = Matrix<double>::Constant(1, 1, k == 0 ? 1.0 : 0.0);
    layer_forward(p[0], s, x, ws);
    if (s.S(0, 0) == 1.0 && first < 0) first = k;
  }
  // k=0 absorbs the spike into Q, k=1 moves it into P, k=2 sees U = 40*0.0172 - 0.5 > 0
  EXPECT_EQ(first, 2);
}

TEST(Network, ZeroInputZeroBiasGivesZeroReadoutsWhenSilent) {
  auto p = init_params<float>(dense_topo({8, 8, 8}), 2);
  for (auto& l : p) l.b.setConstant(-0.05f);
  Network<float> net(p, 2);
  Rng rng(1);
  for (int k = 0; k < 20; ++k) {
    net.step(Matrix<float>::Zero(2, 6), rng);
    for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(net.readout(l).cwiseAbs().sum(), 0.0f);
  }
}

TEST(Network, BatchRowsAreIndependent) {
  auto p = init_params<float>(table2_topo(), 5);
  for (auto& l : p) l.geom.dropout = 0.0;
  Network<float> net(p, 2);
  Rng rng(3), drop(1);
  for (int k = 0; k < 8; ++k) {
    Matrix<float> x = poisson(1, net.input_size(), rng, 0.1);
    Matrix<float> both(2, net.input_size());
    both.row(0) = x;
    both.row(1) = x;
    net.step(both, drop, false);
    for (std::size_t l = 0; l < 3; ++l) {
      ASSERT_EQ(net.spikes(l).row(0), net.spikes(l).row(1));
      ASSERT_EQ(net.readout(l).row(0), net.readout(l).row(1));
    }
  }
}

TEST(Network, RemovingTopLayerLeavesLowerLayersUnchanged) {
  auto p = init_params<float>(dense_topo({16, 16, 16}), 4);
  Network<float> full(p, 1);
  Network<float> cut({p[0], p[1]}, 1);
  Rng in(1), d1(2), d2(2);
  for (int k = 0; k < 50; ++k) {
    const Matrix<float> x = poisson(1, 6, in, 0.3);
    full.step(x, d1, false);
    cut.step(x, d2, false);
    ASSERT_EQ(full.readout(0), cut.readout(0));
    ASSERT_EQ(full.readout(1), cut.readout(1));
  }
}

TEST(Network, ReadoutDependsOnlyOnItsLayer) {
  auto p = init_params<float>(dense_topo({16, 16, 16}), 4);
  auto q = p;
  q[0].G.setRandom();
  q[2].G.setRandom();
  Network<float> a(p, 1), b(q, 1);
  Rng in(1), d1(2), d2(2);
  for (int k = 0; k < 50; ++k) {
    const Matrix<float> x = poisson(1, 6, in, 0.3);
    a.step(x, d1, false);
    b.step(x, d2, false);
    ASSERT_EQ(a.readout(1), b.readout(1));
    ASSERT_EQ(a.spikes(2), b.spikes(2));
  }
}

TEST(Network, OrderOfInputSpikesMatters) {
  NetworkTopology t = dense_topo({1}, 2, 1);
  auto p = init_params<double>(t, 1);
  p[0].W << 3.0, -3.0;
  p[0].b << -0.01;
  auto run = [&](int first) {
    Network<double> net(p, 1);
    Rng rng(0);
    std::vector<double> u;
    for (int k = 0; k < 12; ++k) {
      Matrix<double> x = Matrix<double>::Zero(1, 2);
      if (k == 0) x(0, first) = 1;
      if (k == 3) x(0, 1 - first) = 1;
      net.step(x, rng, false);
      u.push_back(net.state(0).U(0, 0));
    }
    return u;
  };
  EXPECT_NE(run(0), run(1));
}

TEST(Network, ConvMatchesDirectConvolution) {
  NetworkTopology t;
  t.input = Shape3{2, 6, 5};
  t.layers = {{LayerKind::conv, 3, 3, 2, 1, 1, 2, 0.0}};
  auto p = init_params<double>(t, 9);
  const auto& g = p[0].geom;
  EXPECT_EQ(g.out, (Shape3{3, 3, 3}));
  LayerState<double> s(1, g.n_in(), g.n_out());
  s.P.setRandom();
  LayerWorkspace<double> ws(g, 1);
  compute_membrane(p[0], s, ws);
  for (int c = 0; c < 3; ++c) {
    for (int oy = 0; oy < 3; ++oy) {
      for (int ox = 0; ox < 3; ++ox) {
        double acc = 0;
        for (int ci = 0; ci < 2; ++ci) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
              if (iy < 0 || ix < 0 || iy >= 6 || ix >= 5) continue;
              acc += p[0].W(c, (ci * 3 + ky) * 3 + kx) * s.P(0, (ci * 6 + iy) * 5 + ix);
            }
          }
        }
        EXPECT_NEAR(s.U(0, (c * 3 + oy) * 3 + ox), acc, 1e-12);
      }
    }
  }
}

TEST(MaxPool, FirstIndexWinsTies) {
  Shape3 shape{1, 2, 4};
  const double pre[] = {1, 1, 0, 2, 1, 0, 2, 2};
  double out[2];
  std::int32_t arg[2];
  max_pool(pre, shape, 2, out, arg);
  EXPECT_EQ(out[0], 1.0);
  EXPECT_EQ(arg[0], 0);
  EXPECT_EQ(out[1], 2.0);
  EXPECT_EQ(arg[1], 3);
}

TEST(Network, SpikesAreBinaryAndStateIsBounded) {
  auto p = init_params<float>(dense_topo({32, 32}, 20, 3), 6);
  Network<float> net(p, 3);
  Rng rng(2);
  for (int k = 0; k < 2000; ++k) {
    net.step(poisson(3, 20, rng, 0.2), rng);
    for (std::size_t l = 0; l < 2; ++l) {
      const auto& S = net.spikes(l);
      for (Eigen::Index i = 0; i < S.size(); ++i) ASSERT_TRUE(S.data()[i] == 0.0f || S.data()[i] == 1.0f);
      ASSERT_LE(net.state(l).P.maxCoeff(), 1.0f + 1e-6f);
      ASSERT_GE(net.state(l).R.minCoeff(), 0.0f);
    }
  }
}

TEST(Network, FeedbackMatricesNeverChangeDuringLearning) {
  auto p = init_params<float>(dense_topo({16, 16}, 6, 3), 4);
  Network<float> net(p, 2);
  Learner<float> learner(net, LearningConfig{});
  std::vector<double> before;
  for (const auto& l : net.layers()) {
    before.push_back(checksum(l.G));
    before.push_back(checksum(l.H));
  }
  Rng rng(1);
  const std::vector<Matrix<float>> targets(2, Matrix<float>::Constant(2, 3, 0.3f));
  for (int k = 0; k < 300; ++k) {
    net.forward(rng);
    learner.compute_gradients(net, targets);
    learner.apply(net, 1e-2);
    net.advance(poisson(2, 6, rng, 0.3));
  }
  std::vector<double> after;
  for (const auto& l : net.layers()) {
    after.push_back(checksum(l.G));
    after.push_back(checksum(l.H));
  }
  EXPECT_EQ(before, after);
  EXPECT_NE(net.layers()[0].W, p[0].W);
}

TEST(Network, NoGradientPathAcrossLayersWithinAStep) {
  auto p = init_params<double>(dense_topo({12, 12, 12}, 8, 3), 2);
  Network<double> net(p, 2);
  Rng rng(4);
  for (int k = 0; k < 30; ++k) net.step(poisson(2, 8, rng, 0.3).cast<double>(), rng, false);
  Network<double> perturbed = net;
  perturbed.layers()[1].W.array() += 0.3;

  const std::vector<Matrix<double>> targets(3, Matrix<double>::Constant(2, 3, 0.5));
  LearningConfig lc;
  lc.regularizer.lambda1 = 0.0;
  lc.regularizer.lambda2 = 0.0;
  Learner<double> a(net, lc), b(perturbed, lc);
  Rng ra(9), rb(9);
  net.forward(ra, false);
  perturbed.forward(rb, false);
  a.compute_gradients(net, targets);
  b.compute_gradients(perturbed, targets);
  for (std::size_t l : {0u, 2u}) {
    EXPECT_EQ(a.gradients(l).dW, b.gradients(l).dW) << "layer " << l;
    EXPECT_EQ(a.gradients(l).db, b.gradients(l).db) << "layer " << l;
  }
  EXPECT_NE(net.state(1).U, perturbed.state(1).U);
}
