#include "decolle/checkpoint.hpp"
#include "decolle/config.hpp"
#include "decolle/metrics.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace decolle;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("decolle_config_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json small_dense() {
  return json::parse(R"({
    "task": "regression",
    "topology": {"input": [16], "layers": [
      {"kind": "dense", "units": 8, "readout": 1, "dropout": 0.0},
      {"kind": "dense", "units": 8, "readout": 1, "dropout": 0.0}]},
    "data": {"n_in": 16, "duration_ms": 100},
    "train": {"batch_size": 1, "burn_in_ms": 0}
  })");
}

struct Model {
  TrainConfig cfg;
  Network<float> net;
  Learner<float> learner;
  explicit Model(const TrainConfig& c, std::uint64_t seed)
      : cfg(c),
        net(init_params<float>(c.topology, seed, c.neuron, c.feedback), 1),
        learner(net, c.learning) {}
};

}  // namespace

TEST(Config, DefaultsDescribeTheGestureNetwork) {
  const TrainConfig c = parse_config(json::object());
  EXPECT_EQ(c.task, Task::classification);
  ASSERT_EQ(c.topology.layers.size(), 3u);
  EXPECT_EQ(c.topology.layers[0].units, 64);
  EXPECT_EQ(c.topology.layers[2].units, 128);
  EXPECT_EQ(c.batch_size, 72);
  EXPECT_EQ(c.eval_batch, 72);
  EXPECT_DOUBLE_EQ(c.learning.optimizer.beta2, 0.95);
  EXPECT_DOUBLE_EQ(c.learning.optimizer.beta1, 0.0);
  EXPECT_DOUBLE_EQ(c.learning.regularizer.lambda1, 0.05);
  EXPECT_EQ(c.schedule.interval_steps, 500);
  EXPECT_EQ(c.updates_per_minibatch(), 450);
}

TEST(Config, UserValuesAndOverridesApply) {
  const TrainConfig c = parse_config(json::parse(R"({"train": {"batch_size": 4, "train_slice_ms": 300}})"),
                                     {"seeds.params=9", "optimizer.lr=0.01", "topology.layers.1.units=5",
                                      "output.dir=runs/x", "loss.kind=mse"});
  EXPECT_EQ(c.batch_size, 4);
  EXPECT_EQ(c.param_seed, 9u);
  EXPECT_DOUBLE_EQ(c.learning.optimizer.lr, 0.01);
  EXPECT_EQ(c.topology.layers[1].units, 5);
  EXPECT_EQ(c.out_dir, "runs/x");
  EXPECT_EQ(c.learning.loss.kind, LossSpec::Kind::mse);
  EXPECT_EQ(c.updates_per_minibatch(), 250);
  EXPECT_EQ(c.document["train"]["batch_size"], 4);
}

TEST(Config, LayerEntriesInheritLayerDefaults) {
  const TrainConfig c = parse_config(small_dense());
  EXPECT_EQ(c.topology.layers[0].kind, LayerKind::dense);
  EXPECT_EQ(c.topology.layers[0].pool, 2);
  EXPECT_EQ(c.topology.input.size(), 16);
  EXPECT_EQ(c.updates_per_minibatch(), 100);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(parse_config(json::parse(R"({"trian": {}})")), ConfigError);
  EXPECT_THROW(parse_config(json::parse(R"({"train": {"batchsize": 3}})")), ConfigError);
  EXPECT_THROW(parse_config(json::parse(R"({"topology": {"input": [4], "layers": [{"kind": "dense", "unit": 3}]}})")),
               ConfigError);
  EXPECT_THROW(parse_config(json::object(), {"optimizer.momentum=0.9"}), ConfigError);
  EXPECT_THROW(parse_config(json::object(), {"novalue"}), ConfigError);
}

TEST(Config, InvalidValuesAreRejected) {
  const std::vector<std::string> bad{
      "train.batch_size=0",    "train.eval_every=0",        "train.burn_in_ms=600",
      "loss.kind=huber",       "loss.delta=0",              "surrogate.half_width=0",
      "optimizer.beta2=1.0",   "optimizer.lr=-1",           "schedule.divisor=1",
      "neuron.tau_mem_ms=0",   "regularizer.lambda1=-0.1",  "feedback.std=-1",
      "task=reinforcement",    "topology.layers.0.kind=rnn", "data.crop=[1]",
      "data.downsample=0",     "train.batch_size=\"many\"", "topology.input=[1,2]"};
  for (const auto& o : bad) EXPECT_THROW(parse_config(json::object(), {o}), ConfigError) << o;
  EXPECT_THROW(parse_config(small_dense(), {"data.n_in=3"}), ConfigError);
  EXPECT_THROW(parse_config(small_dense(), {"topology.layers.0.readout=2"}), ConfigError);
}

TEST(Config, LoadFromFile) {
  const fs::path dir = scratch("load");
  std::ofstream(dir / "c.json") << "// comment\n" << small_dense().dump();
  const TrainConfig c = load_config(dir / "c.json", {"train.iterations=3"});
  EXPECT_EQ(c.iterations, 3);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
}

TEST(Config, TopologySignatureDistinguishesShapes) {
  const auto a = parse_config(small_dense()).topology;
  const auto b = parse_config(small_dense(), {"topology.layers.1.units=9"}).topology;
  EXPECT_EQ(topology_signature(a), topology_signature(a));
  EXPECT_NE(topology_signature(a), topology_signature(b));
}

TEST(Metrics, EmptyRunWritesHeaderOnly) {
  const fs::path dir = scratch("empty");
  RunMetrics m;
  write_metrics_csv(dir / "metrics.csv", m);
  std::ifstream in(dir / "metrics.csv");
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(all, "iteration,layer,loss,error,firing_rate\n");
  EXPECT_TRUE(read_metrics_csv(dir / "metrics.csv").empty());
}

TEST(Metrics, RoundTripIsExact) {
  const fs::path dir = scratch("roundtrip");
  RunMetrics m;
  const int evals = 4, layers = 3;
  for (int i = 0; i < evals; ++i) {
    for (int l = 0; l < layers; ++l) {
      m.rows.push_back({i * 100, l, 1.0 / (3 + i + l), 0.1 * l + 1e-17, 0.123456789012345678 * i});
    }
  }
  emit_metrics(m, dir, true);
  const auto back = read_metrics_csv(dir / "metrics.csv");
  ASSERT_EQ(back.size(), static_cast<std::size_t>(evals * layers));
  EXPECT_EQ(back, m.rows);
  EXPECT_EQ(m.layer_rows(1).size(), 4u);
  EXPECT_TRUE(fs::exists(dir / "error_curves.svg"));
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  EXPECT_FALSE(fs::exists(dir / "readouts.svg"));
}

TEST(Metrics, MalformedFilesAreRejected) {
  const fs::path dir = scratch("malformed");
  std::ofstream(dir / "a.csv") << "iter,layer\n";
  EXPECT_THROW(read_metrics_csv(dir / "a.csv"), IoError);
  std::ofstream(dir / "b.csv") << "iteration,layer,loss,error,firing_rate\n1,2,3\n";
  EXPECT_THROW(read_metrics_csv(dir / "b.csv"), IoError);
  std::ofstream(dir / "c.csv") << "iteration,layer,loss,error,firing_rate\n1,x,3,4,5\n";
  EXPECT_THROW(read_metrics_csv(dir / "c.csv"), IoError);
  EXPECT_THROW(read_metrics_csv(dir / "missing.csv"), IoError);
}

TEST(Checkpoint, RoundTripRestoresParametersAndOptimizer) {
  const TrainConfig cfg = parse_config(small_dense());
  Model a(cfg, 1);
  Rng rng(1);
  const std::vector<Matrix<float>> targets(2, Matrix<float>::Ones(1, 1));
  for (int k = 0; k < 20; ++k) {
    a.net.forward(rng);
    a.learner.compute_gradients(a.net, targets);
    a.learner.apply(a.net, 1e-2);
    a.net.advance(Matrix<float>::Ones(1, 16));
  }
  const std::string bytes = checkpoint_bytes(cfg.topology, a.net, a.learner, 20);
  Model b(cfg, 2);
  EXPECT_NE(b.net.layers()[0].W, a.net.layers()[0].W);
  EXPECT_EQ(restore_checkpoint(bytes, cfg.topology, b.net, b.learner), 20);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(b.net.layers()[l].W, a.net.layers()[l].W);
    EXPECT_EQ(b.net.layers()[l].b, a.net.layers()[l].b);
    EXPECT_EQ(b.net.layers()[l].G, a.net.layers()[l].G);
    EXPECT_EQ(b.net.layers()[l].H, a.net.layers()[l].H);
    EXPECT_EQ(b.learner.optimizer_W(l).u, a.learner.optimizer_W(l).u);
    EXPECT_EQ(b.learner.optimizer_b(l).t, 20);
  }
  EXPECT_EQ(checkpoint_bytes(cfg.topology, b.net, b.learner, 20), bytes);

  const fs::path dir = scratch("ckpt");
  save_checkpoint(dir / "c.bin", cfg.topology, a.net, a.learner, 7);
  Model c(cfg, 3);
  EXPECT_EQ(load_checkpoint(dir / "c.bin", cfg.topology, c.net, c.learner), 7);
  EXPECT_EQ(c.net.layers()[1].W, a.net.layers()[1].W);
  EXPECT_FALSE(fs::exists(dir / "c.bin.tmp"));
}

TEST(Checkpoint, TopologyMismatchIsReported) {
  const TrainConfig cfg = parse_config(small_dense());
  Model a(cfg, 1);
  const std::string bytes = checkpoint_bytes(cfg.topology, a.net, a.learner, 0);
  const TrainConfig other = parse_config(small_dense(), {"topology.layers.1.units=9"});
  Model b(other, 1);
  EXPECT_THROW(restore_checkpoint(bytes, other.topology, b.net, b.learner), TopologyMismatchError);

  Network<double> dnet(init_params<double>(cfg.topology, 1), 1);
  Learner<double> dlearner(dnet, cfg.learning);
  EXPECT_THROW(restore_checkpoint(bytes, cfg.topology, dnet, dlearner), TopologyMismatchError);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const TrainConfig cfg = parse_config(small_dense());
  Model a(cfg, 1);
  const std::string bytes = checkpoint_bytes(cfg.topology, a.net, a.learner, 0);
  std::string v = bytes;
  v[8] = 2;
  EXPECT_THROW(restore_checkpoint(v, cfg.topology, a.net, a.learner), IoError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(restore_checkpoint(magic, cfg.topology, a.net, a.learner), IoError);
  EXPECT_THROW(restore_checkpoint(bytes.substr(0, bytes.size() - 5), cfg.topology, a.net, a.learner), IoError);
  EXPECT_THROW(restore_checkpoint(bytes + "x", cfg.topology, a.net, a.learner), IoError);
  EXPECT_THROW(load_checkpoint(scratch("none") / "c.bin", cfg.topology, a.net, a.learner), IoError);
}
