#pragma once

// Training configuration. The document is JSON; keys are documented in
// docs/config.md. Unknown keys are rejected so that typos fail fast.

#include "decolle/dynamics.hpp"
#include "decolle/errors.hpp"
#include "decolle/learning.hpp"
#include "decolle/network.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace decolle {

using json = nlohmann::json;

enum class Task { classification, regression };

struct DataConfig {
  // classification
  std::string dir;
  std::string train_split = "train";
  std::string test_split = "test";
  int downsample = 1;
  int crop_width = 0;  // 0 keeps the full sensor
  int crop_height = 0;
  int max_train = 0;  // 0 uses every recording
  int max_test = 0;
  // regression
  int n_in = 512;
  double rate_hz = 20.0;
  double duration_ms = 500.0;
  double fast_hz = 10.0;
  double slow_hz = 2.0;
};

struct TrainConfig {
  Task task = Task::classification;
  NetworkTopology topology;
  NeuronSpec neuron;
  FeedbackNoiseSpec feedback;
  LearningConfig learning;
  LrSchedule schedule;
  int batch_size = 72;
  int eval_batch = 0;  // 0 means batch_size
  double burn_in_ms = 50.0;
  double train_slice_ms = 500.0;
  double test_slice_ms = 1800.0;
  std::int64_t iterations = 100;
  std::int64_t eval_every = 100;
  std::int64_t checkpoint_every = 0;
  bool test_dropout = true;
  std::uint64_t param_seed = 1;
  std::uint64_t data_seed = 2;
  std::uint64_t dropout_seed = 3;
  DataConfig data;
  std::string out_dir = "runs/default";
  bool plot = true;
  json document;  // fully resolved document the config was built from

  int steps(double ms) const { return static_cast<int>(std::lround(ms / neuron.decay.dt)); }
  int burn_in_steps() const { return steps(burn_in_ms); }
  /// Weight updates per minibatch: (slice - burn-in) / dt.
  std::int64_t updates_per_minibatch() const {
    const double slice = task == Task::regression ? data.duration_ms : train_slice_ms;
    return steps(slice) - burn_in_steps();
  }
};

inline json default_config_document() {
  return json::parse(R"({
    "task": "classification",
    "topology": {
      "input": [2, 32, 32],
      "layers": [
        {"kind": "conv", "units": 64, "kernel": 7, "stride": 1, "padding": 2, "pool": 2, "readout": 11, "dropout": 0.5},
        {"kind": "conv", "units": 128, "kernel": 7, "stride": 1, "padding": 2, "pool": 1, "readout": 11, "dropout": 0.5},
        {"kind": "conv", "units": 128, "kernel": 7, "stride": 1, "padding": 2, "pool": 2, "readout": 11, "dropout": 0.5}
      ]
    },
    "neuron": {"dt_ms": 1.0, "tau_mem_ms": 10.0, "tau_syn_ms": 5.0, "tau_ref_ms": 10.0, "rho": 1.0},
    "surrogate": {"kind": "boxcar", "half_width": 0.5},
    "loss": {"kind": "smooth_l1", "delta": 1.0},
    "regularizer": {"lambda1": 0.05, "lambda2": 0.05, "u_margin": 0.01, "rate_floor": 0.1},
    "feedback": {"sign_concordant": true, "mean": 1.0, "std": 0.5, "clip_at_zero": true},
    "optimizer": {"lr": 1e-9, "beta1": 0.0, "beta2": 0.95, "eps": 1e-8},
    "schedule": {"divisor": 5.0, "interval": 500},
    "train": {
      "batch_size": 72, "eval_batch": 0, "burn_in_ms": 50.0, "train_slice_ms": 500.0,
      "test_slice_ms": 1800.0, "iterations": 100, "eval_every": 100, "checkpoint_every": 0,
      "test_dropout": true
    },
    "seeds": {"params": 1, "data": 2, "dropout": 3},
    "data": {
      "dir": "", "train_split": "train", "test_split": "test", "downsample": 1,
      "crop": [0, 0], "max_train": 0, "max_test": 0,
      "n_in": 512, "rate_hz": 20.0, "duration_ms": 500.0, "fast_hz": 10.0, "slow_hz": 2.0
    },
    "output": {"dir": "runs/default", "plot": true}
  })");
}

inline json default_layer_document() {
  return default_config_document()["topology"]["layers"][0];
}

namespace detail {

inline void check_keys(const json& user, const json& defaults, const std::string& path) {
  if (!user.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    if (key == "topology.layers") {
      if (!it->is_array()) throw ConfigError("topology.layers must be an array");
      for (std::size_t i = 0; i < it->size(); ++i) {
        check_keys((*it)[i], default_layer_document(), key + "." + std::to_string(i));
      }
    } else if (it->is_object()) {
      check_keys(*it, defaults[it.key()], key);
    }
  }
}

template <typename V>
V get(const json& doc, const char* path) {
  try {
    return doc.at(json::json_pointer(path)).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field ") + path + ": " + e.what());
  }
}

}  // namespace detail

/// Apply `key=value` where key is a dotted path (array indices allowed) and the
/// value is parsed as JSON, falling back to a plain string.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  std::string pointer;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) pointer += "/" + part;
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  try {
    doc[json::json_pointer(pointer)] = value;
  } catch (const json::exception& e) {
    throw ConfigError("cannot apply override " + assignment + ": " + e.what());
  }
}

inline NetworkTopology parse_topology(const json& t) {
  NetworkTopology topo;
  const auto in = t.at("input").get<std::vector<int>>();
  if (in.size() == 1) {
    topo.input = Shape3{in[0], 1, 1};
  } else if (in.size() == 3) {
    topo.input = Shape3{in[0], in[1], in[2]};
  } else {
    throw ConfigError("topology.input must be [n] or [channels, height, width]");
  }
  const json layer_defaults = default_layer_document();
  for (const auto& raw : t.at("layers")) {
    json l = layer_defaults;
    l.update(raw);
    LayerSpec s;
    const auto kind = l.at("kind").get<std::string>();
    if (kind == "dense") {
      s.kind = LayerKind::dense;
    } else if (kind == "conv") {
      s.kind = LayerKind::conv;
    } else {
      throw ConfigError("layer kind must be dense or conv, got " + kind);
    }
    s.units = l.at("units").get<int>();
    s.kernel = l.at("kernel").get<int>();
    s.stride = l.at("stride").get<int>();
    s.padding = l.at("padding").get<int>();
    s.pool = l.at("pool").get<int>();
    s.readout = l.at("readout").get<int>();
    s.dropout = l.at("dropout").get<double>();
    topo.layers.push_back(s);
  }
  resolve_geometry(topo);
  return topo;
}

inline TrainConfig parse_config(const json& user, const std::vector<std::string>& overrides = {}) {
  json doc = default_config_document();
  const json patch = user.is_null() ? json::object() : user;
  detail::check_keys(patch, doc, "");
  doc.merge_patch(patch);  // arrays, including topology.layers, are replaced wholesale
  for (const auto& o : overrides) apply_override(doc, o);
  detail::check_keys(doc, default_config_document(), "");

  using detail::get;
  TrainConfig c;
  c.document = doc;
  try {
    const auto task = get<std::string>(doc, "/task");
    if (task == "classification") {
      c.task = Task::classification;
    } else if (task == "regression") {
      c.task = Task::regression;
    } else {
      throw ConfigError("task must be classification or regression");
    }
    c.topology = parse_topology(doc.at("topology"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("topology: ") + e.what());
  }

  c.neuron.decay = make_decay_constants(get<double>(doc, "/neuron/dt_ms"), get<double>(doc, "/neuron/tau_mem_ms"),
                                        get<double>(doc, "/neuron/tau_syn_ms"), get<double>(doc, "/neuron/tau_ref_ms"));
  c.neuron.rho = get<double>(doc, "/neuron/rho");

  if (get<std::string>(doc, "/surrogate/kind") != "boxcar") throw ConfigError("surrogate.kind must be boxcar");
  c.learning.surrogate.half_width = get<double>(doc, "/surrogate/half_width");
  if (!(c.learning.surrogate.half_width > 0)) throw ConfigError("surrogate.half_width must be > 0");

  const auto loss = get<std::string>(doc, "/loss/kind");
  if (loss == "mse") {
    c.learning.loss.kind = LossSpec::Kind::mse;
  } else if (loss == "smooth_l1") {
    c.learning.loss.kind = LossSpec::Kind::smooth_l1;
  } else {
    throw ConfigError("loss.kind must be mse or smooth_l1");
  }
  c.learning.loss.smooth_l1_delta = get<double>(doc, "/loss/delta");
  validate(c.learning.loss);

  c.learning.regularizer.lambda1 = get<double>(doc, "/regularizer/lambda1");
  c.learning.regularizer.lambda2 = get<double>(doc, "/regularizer/lambda2");
  c.learning.regularizer.u_margin = get<double>(doc, "/regularizer/u_margin");
  c.learning.regularizer.rate_floor = get<double>(doc, "/regularizer/rate_floor");
  validate(c.learning.regularizer);

  c.learning.sign_concordant = get<bool>(doc, "/feedback/sign_concordant");
  c.feedback.mean = get<double>(doc, "/feedback/mean");
  c.feedback.std = get<double>(doc, "/feedback/std");
  c.feedback.clip_at_zero = get<bool>(doc, "/feedback/clip_at_zero");
  if (!(c.feedback.std >= 0)) throw ConfigError("feedback.std must be >= 0");

  c.learning.optimizer.lr = get<double>(doc, "/optimizer/lr");
  c.learning.optimizer.beta1 = get<double>(doc, "/optimizer/beta1");
  c.learning.optimizer.beta2 = get<double>(doc, "/optimizer/beta2");
  c.learning.optimizer.eps = get<double>(doc, "/optimizer/eps");
  validate(c.learning.optimizer);

  c.schedule.divisor = get<double>(doc, "/schedule/divisor");
  c.schedule.interval_steps = get<std::int64_t>(doc, "/schedule/interval");
  validate(c.schedule);

  c.batch_size = get<int>(doc, "/train/batch_size");
  c.eval_batch = get<int>(doc, "/train/eval_batch");
  c.burn_in_ms = get<double>(doc, "/train/burn_in_ms");
  c.train_slice_ms = get<double>(doc, "/train/train_slice_ms");
  c.test_slice_ms = get<double>(doc, "/train/test_slice_ms");
  c.iterations = get<std::int64_t>(doc, "/train/iterations");
  c.eval_every = get<std::int64_t>(doc, "/train/eval_every");
  c.checkpoint_every = get<std::int64_t>(doc, "/train/checkpoint_every");
  c.test_dropout = get<bool>(doc, "/train/test_dropout");

  c.param_seed = get<std::uint64_t>(doc, "/seeds/params");
  c.data_seed = get<std::uint64_t>(doc, "/seeds/data");
  c.dropout_seed = get<std::uint64_t>(doc, "/seeds/dropout");

  c.data.dir = get<std::string>(doc, "/data/dir");
  c.data.train_split = get<std::string>(doc, "/data/train_split");
  c.data.test_split = get<std::string>(doc, "/data/test_split");
  c.data.downsample = get<int>(doc, "/data/downsample");
  const auto crop = get<std::vector<int>>(doc, "/data/crop");
  if (crop.size() != 2) throw ConfigError("data.crop must be [width, height]");
  c.data.crop_width = crop[0];
  c.data.crop_height = crop[1];
  c.data.max_train = get<int>(doc, "/data/max_train");
  c.data.max_test = get<int>(doc, "/data/max_test");
  c.data.n_in = get<int>(doc, "/data/n_in");
  c.data.rate_hz = get<double>(doc, "/data/rate_hz");
  c.data.duration_ms = get<double>(doc, "/data/duration_ms");
  c.data.fast_hz = get<double>(doc, "/data/fast_hz");
  c.data.slow_hz = get<double>(doc, "/data/slow_hz");

  c.out_dir = get<std::string>(doc, "/output/dir");
  c.plot = get<bool>(doc, "/output/plot");

  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (c.eval_batch < 0) throw ConfigError("train.eval_batch must be >= 0");
  if (c.eval_batch == 0) c.eval_batch = c.batch_size;
  if (c.iterations < 0) throw ConfigError("train.iterations must be >= 0");
  if (c.eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (c.burn_in_ms < 0) throw ConfigError("train.burn_in_ms must be >= 0");
  if (c.task == Task::classification) {
    if (!(c.burn_in_ms < c.train_slice_ms) || !(c.burn_in_ms < c.test_slice_ms)) {
      throw ConfigError("burn-in must be shorter than the train and test slices");
    }
  } else {
    if (!(c.burn_in_ms < c.data.duration_ms)) throw ConfigError("burn-in must be shorter than the regression sequence");
    if (c.topology.input.size() != c.data.n_in) throw ConfigError("regression input size must equal data.n_in");
    if (c.topology.layers.size() > 3) throw ConfigError("the regression task provides three pseudo-targets");
    for (const auto& l : c.topology.layers) {
      if (l.readout != 1) throw ConfigError("regression layers need a readout of size 1");
    }
  }
  if (c.data.downsample < 1) throw ConfigError("data.downsample must be >= 1");
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_config(doc, overrides);
}

/// Canonical one-line description of a topology, stored in checkpoints.
inline std::string topology_signature(const NetworkTopology& t) {
  std::ostringstream s;
  s << "in=" << t.input.channels << 'x' << t.input.height << 'x' << t.input.width;
  for (const auto& l : t.layers) {
    s << ';' << (l.kind == LayerKind::dense ? "dense" : "conv") << ':' << l.units;
    if (l.kind == LayerKind::conv) s << ",k" << l.kernel << ",s" << l.stride << ",p" << l.padding << ",pool" << l.pool;
    s << ",r" << l.readout << ",d" << l.dropout;
  }
  return s.str();
}

}  // namespace decolle
