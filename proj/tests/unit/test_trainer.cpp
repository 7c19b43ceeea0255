#include "decolle/synthetic.hpp"
#include "decolle/trainer.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace decolle;
namespace fs = std::filesystem;

namespace {

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "decolle_trainer_digits";
    fs::remove_all(dir_);
    SynthDatasetSpec spec;
    spec.kind = SynthKind::digits;
    spec.train_per_class = 2;
    spec.test_per_class = 1;
    spec.seed = 5;
    spec.recording = SynthSpec{400, 0.7, 0.5};
    write_synthetic_dataset(dir_, spec);
  }

  static json base() {
    json j = json::parse(R"({
      "topology": {"input": [2, 34, 34], "layers": [
        {"kind": "conv", "units": 4, "kernel": 7, "padding": 2, "pool": 2, "readout": 10, "dropout": 0.5},
        {"kind": "dense", "units": 16, "readout": 10, "dropout": 0.0}]},
      "optimizer": {"lr": 1e-3},
      "train": {"batch_size": 4, "burn_in_ms": 10, "train_slice_ms": 40, "test_slice_ms": 60,
                "iterations": 3, "eval_every": 2},
      "output": {"plot": false}
    })");
    j["data"]["dir"] = dir_.string();
    return j;
  }

  static TrainConfig config(const std::vector<std::string>& overrides = {}) {
    return parse_config(base(), overrides);
  }

  static inline fs::path dir_;
};

bool same_parameters(const Network<float>& a, const Network<float>& b) {
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a.layers()[l].W != b.layers()[l].W || a.layers()[l].b != b.layers()[l].b) return false;
  }
  return true;
}

}  // namespace

TEST(ArgmaxLowest, TiesGoToTheLowestIndex) {
  EXPECT_EQ(argmax_lowest(std::vector<double>{1, 3, 3}), 1);
  EXPECT_EQ(argmax_lowest(std::vector<double>{0, 0, 0, 0}), 0);
  EXPECT_EQ(argmax_lowest(std::vector<double>{-1, -2, 5}), 2);
}

TEST(DerivedRng, StreamsDependOnEveryKey) {
  EXPECT_EQ(derived_rng(1, 2, 3)(), derived_rng(1, 2, 3)());
  EXPECT_NE(derived_rng(1, 2, 3)(), derived_rng(1, 2, 4)());
  EXPECT_NE(derived_rng(1, 2, 3)(), derived_rng(1, 3, 3)());
  EXPECT_NE(derived_rng(1, 2, 3)(), derived_rng(2, 2, 3)());
}

TEST_F(TrainerTest, LoadsAndValidatesTheDataset) {
  Trainer<float> t(config());
  EXPECT_EQ(t.train_set().recordings.size(), 20u);
  EXPECT_EQ(t.test_set().recordings.size(), 10u);
  EXPECT_EQ(t.train_set().classes, 10);
  EXPECT_EQ(t.steps_per_minibatch(), 40);
}

TEST_F(TrainerTest, OneUpdatePerStepAfterBurnIn) {
  Trainer<float> t(config({"train.train_slice_ms=300", "train.burn_in_ms=50", "train.test_slice_ms=100"}));
  EXPECT_EQ(t.config().updates_per_minibatch(), 250);
  t.train_minibatch();
  for (std::size_t l = 0; l < t.network().size(); ++l) {
    EXPECT_EQ(t.learner().optimizer_W(l).t, 250);
    EXPECT_EQ(t.learner().optimizer_b(l).t, 250);
  }
}

TEST_F(TrainerTest, SliceEqualToBurnInIsRejected) {
  EXPECT_THROW(config({"train.burn_in_ms=40"}), ConfigError);
}

TEST_F(TrainerTest, NoUpdatesDuringBurnIn) {
  // Burn-in one step short of the slice leaves exactly one update.
  Trainer<float> t(config({"train.burn_in_ms=39"}));
  t.train_minibatch();
  EXPECT_EQ(t.learner().optimizer_W(0).t, 1);
}

TEST_F(TrainerTest, EpochsVisitEverySampleOnce) {
  Trainer<float> t(config());
  std::multiset<std::size_t> seen;
  for (int i = 0; i < 5; ++i) {
    for (auto s : t.minibatch_indices(i)) seen.insert(s);
  }
  ASSERT_EQ(seen.size(), 20u);
  for (std::size_t s = 0; s < 20; ++s) EXPECT_EQ(seen.count(s), 1u);
  EXPECT_NE(t.minibatch_indices(0), t.minibatch_indices(5));
}

TEST_F(TrainerTest, TrainingIsDeterministic) {
  Trainer<float> a(config()), b(config());
  const auto ma = a.run();
  const auto mb = b.run();
  EXPECT_TRUE(same_parameters(a.network(), b.network()));
  EXPECT_EQ(ma.rows, mb.rows);
  ASSERT_EQ(ma.train_loss.size(), mb.train_loss.size());
  for (std::size_t i = 0; i < ma.train_loss.size(); ++i) EXPECT_EQ(ma.train_loss[i].loss, mb.train_loss[i].loss);
  Trainer<float> c(config({"seeds.params=8"}));
  c.run();
  EXPECT_FALSE(same_parameters(a.network(), c.network()));
}

TEST_F(TrainerTest, ResumedRunMatchesUninterruptedRun) {
  const fs::path ckpt = fs::temp_directory_path() / "decolle_trainer_resume.bin";
  Trainer<float> full(config({"train.iterations=4"}));
  full.run();

  Trainer<float> first(config({"train.iterations=2"}));
  first.run();
  first.save(ckpt);
  Trainer<float> second(config({"train.iterations=4"}));
  second.load(ckpt);
  EXPECT_EQ(second.step(), 2);
  second.run();
  EXPECT_EQ(second.step(), 4);
  EXPECT_TRUE(same_parameters(full.network(), second.network()));
  EXPECT_EQ(full.learner().optimizer_W(0).u, second.learner().optimizer_W(0).u);
}

TEST_F(TrainerTest, MetricsCoverEveryEvaluation) {
  Trainer<float> t(config());
  const RunMetrics m = t.run();
  // evaluations at 0, 2 and the final step 3, for 2 layers
  ASSERT_EQ(m.rows.size(), 6u);
  EXPECT_EQ(m.rows[0].iteration, 0);
  EXPECT_EQ(m.rows[2].iteration, 2);
  EXPECT_EQ(m.rows[4].iteration, 3);
  EXPECT_EQ(m.minibatches, 3);
  EXPECT_EQ(m.total_updates, 90);
  EXPECT_EQ(m.train_loss.size(), 6u);
  for (const auto& r : m.rows) {
    EXPECT_GE(r.error, 0.0);
    EXPECT_LE(r.error, 1.0);
    EXPECT_GE(r.firing_rate, 0.0);
    EXPECT_LE(r.firing_rate, 1.0);
    EXPECT_GE(r.loss, 0.0);
  }
}

TEST_F(TrainerTest, EvaluationIndependentOfEvalBatch) {
  // Padding a short final batch must not change the result.
  const auto a = Trainer<float>(config({"train.eval_batch=10", "train.test_dropout=false"})).evaluate();
  const auto b = Trainer<float>(config({"train.eval_batch=3", "train.test_dropout=false"})).evaluate();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t l = 0; l < a.size(); ++l) {
    EXPECT_DOUBLE_EQ(a[l].error, b[l].error);
    EXPECT_NEAR(a[l].loss, b[l].loss, 1e-9 * std::max(1.0, a[l].loss));
    EXPECT_NEAR(a[l].firing_rate, b[l].firing_rate, 1e-12);
  }
}

TEST_F(TrainerTest, SilentNetworkPredictsClassZero) {
  Trainer<float> t(config({"train.test_dropout=false"}));
  for (auto& p : t.network().layers()) p.b.setConstant(-100.0f);
  const auto ev = t.evaluate();
  // all readouts are zero, so every sample is assigned label 0: 1 of 10 test samples is right
  for (const auto& e : ev) {
    EXPECT_DOUBLE_EQ(e.error, 0.9);
    EXPECT_EQ(e.firing_rate, 0.0);
  }
}

TEST_F(TrainerTest, FailsFastOnMismatchedData) {
  EXPECT_THROW(Trainer<float>(config({"topology.input=[2,32,32]"})), ConfigError);
  EXPECT_THROW(Trainer<float>(config({"topology.layers.1.readout=5"})), ConfigError);
  EXPECT_THROW(Trainer<float>(config({"train.test_slice_ms=1000"})), SampleTooShortError);
  EXPECT_THROW(Trainer<float>(config({"data.dir=\"/nonexistent/decolle\""})), IoError);
  EXPECT_THROW(Trainer<float>(config({"data.dir=\"\""})), ConfigError);
  EXPECT_THROW(Trainer<float>(config({"data.test_split=validation"})), IoError);
}

TEST_F(TrainerTest, CropAndDownsampleChangeTheInputShape) {
  Trainer<float> t(config({"data.crop=[32,32]", "topology.input=[2,32,32]"}));
  EXPECT_EQ(t.train_set().width, 32);
  EXPECT_EQ(t.network().input_size(), 2 * 32 * 32);
  Trainer<float> d(config({"data.downsample=2", "topology.input=[2,17,17]", "topology.layers.0.pool=1"}));
  EXPECT_EQ(d.train_set().width, 17);
}

TEST(RegressionTrainer, RunWritesMetricsAndTraces) {
  const fs::path out = fs::temp_directory_path() / "decolle_trainer_regression";
  fs::remove_all(out);
  json j = json::parse(R"({
    "task": "regression",
    "topology": {"input": [32], "layers": [
      {"kind": "dense", "units": 16, "readout": 1, "dropout": 0.0},
      {"kind": "dense", "units": 16, "readout": 1, "dropout": 0.0},
      {"kind": "dense", "units": 16, "readout": 1, "dropout": 0.0}]},
    "optimizer": {"lr": 1e-3},
    "data": {"n_in": 32, "duration_ms": 100},
    "train": {"batch_size": 1, "burn_in_ms": 0, "iterations": 2, "eval_every": 1}
  })");
  j["output"]["dir"] = out.string();
  const RunMetrics m = run_training<float>(parse_config(j));
  EXPECT_EQ(m.rows.size(), 9u);
  ASSERT_EQ(m.readout_trace.size(), 3u);
  EXPECT_EQ(m.readout_trace[0].size(), 100u);
  EXPECT_FLOAT_EQ(m.target_trace[0].back(), 1.0f);
  for (const char* f : {"metrics.csv", "train_loss.csv", "timing.csv", "summary.json", "config.json",
                        "checkpoint.bin", "error_curves.svg", "readouts.svg", "readouts.csv"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  EXPECT_EQ(read_metrics_csv(out / "metrics.csv"), m.rows);
}
