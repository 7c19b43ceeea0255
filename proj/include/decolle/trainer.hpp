#pragma once

// Minibatch training loop and evaluation.
//
// Each minibatch starts from zero state and streams its frames one step at a
// time. During burn-in the network only runs forward; afterwards every step
// computes all local losses and applies one AdaMax update.
//
// Sample order and slice offsets of minibatch i depend only on (data_seed, i),
// dropout masks only on (dropout_seed, i), so a run resumed from a checkpoint
// at step i continues exactly as the uninterrupted run would.

#include "decolle/checkpoint.hpp"
#include "decolle/config.hpp"
#include "decolle/events.hpp"
#include "decolle/learning.hpp"
#include "decolle/metrics.hpp"
#include "decolle/network.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace decolle {

/// One preprocessed recording held in memory.
struct Recording {
  EventStream stream;
  int label = 0;
  std::string path;

  double length_ms() const { return static_cast<double>(stream.end_us()) / 1000.0; }
};

struct EventDataset {
  std::vector<Recording> recordings;
  int width = 0;
  int height = 0;
  int classes = 0;
};

/// Apply the configured downsampling and crop to a raw recording.
inline EventStream preprocess(const EventStream& raw, const DataConfig& d) {
  EventStream s = d.downsample > 1 ? downsample_sum(raw, d.downsample) : raw;
  if (d.crop_width > 0 || d.crop_height > 0) {
    s = crop(s, d.crop_width > 0 ? d.crop_width : s.width, d.crop_height > 0 ? d.crop_height : s.height);
  }
  return s;
}

/// Load every manifest row of `split`, keeping at most `limit` rows (0 keeps all).
inline EventDataset load_event_dataset(const DataConfig& d, const std::string& split, int limit) {
  if (d.dir.empty()) throw ConfigError("data.dir is required for classification");
  EventDataset ds;
  for (const auto& row : read_manifest(d.dir)) {
    if (row.split != split) continue;
    if (limit > 0 && static_cast<int>(ds.recordings.size()) >= limit) break;
    if (row.label < 0) throw IoError("negative label for " + row.path);
    Recording r;
    r.stream = preprocess(load_event_file(std::filesystem::path(d.dir) / row.path), d);
    r.label = row.label;
    r.path = row.path;
    if (ds.recordings.empty()) {
      ds.width = r.stream.width;
      ds.height = r.stream.height;
    } else if (r.stream.width != ds.width || r.stream.height != ds.height) {
      throw IoError(row.path + " has a different sensor size than the rest of the split");
    }
    ds.classes = std::max(ds.classes, r.label + 1);
    ds.recordings.push_back(std::move(r));
  }
  if (ds.recordings.empty()) throw IoError("no recordings with split '" + split + "' in " + d.dir);
  return ds;
}

/// Per-layer result of one evaluation pass.
struct LayerEval {
  double loss = 0;         // mean local loss per post-burn-in step
  double error = 0;        // classification error, or RMS readout deviation for regression
  double firing_rate = 0;  // spikes per neuron per step after burn-in
};

inline Rng derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b)};
  return Rng(seq);
}

/// Argmax with ties broken towards the lowest index.
template <typename V>
int argmax_lowest(const V& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

template <typename T>
class Trainer {
 public:
  /// Loads datasets and validates them against the config before any training.
  explicit Trainer(TrainConfig cfg)
      : cfg_(std::move(cfg)),
        net_(init_params<T>(cfg_.topology, cfg_.param_seed, cfg_.neuron, cfg_.feedback), cfg_.batch_size),
        learner_(net_, cfg_.learning) {
    if (cfg_.task == Task::classification) {
      train_ = load_event_dataset(cfg_.data, cfg_.data.train_split, cfg_.data.max_train);
      test_ = load_event_dataset(cfg_.data, cfg_.data.test_split, cfg_.data.max_test);
      validate_dataset(train_, cfg_.train_slice_ms, "train");
      validate_dataset(test_, cfg_.test_slice_ms, "test");
    } else {
      regression_ = poisson_regression_task(cfg_.data.n_in, cfg_.data.rate_hz, cfg_.steps(cfg_.data.duration_ms),
                                            cfg_.data_seed, cfg_.neuron.decay.dt,
                                            {cfg_.data.fast_hz, cfg_.data.slow_hz});
    }
    targets_.resize(net_.size());
    for (std::size_t l = 0; l < net_.size(); ++l) {
      targets_[l] = Matrix<T>::Zero(cfg_.batch_size, net_.layers()[l].geom.readout);
    }
    input_ = Matrix<T>::Zero(cfg_.batch_size, net_.input_size());
  }

  const TrainConfig& config() const { return cfg_; }
  Network<T>& network() { return net_; }
  const Network<T>& network() const { return net_; }
  Learner<T>& learner() { return learner_; }
  std::int64_t step() const { return step_; }
  const EventDataset& train_set() const { return train_; }
  const EventDataset& test_set() const { return test_; }
  const RegressionTask& regression_task() const { return regression_; }

  void save(const std::filesystem::path& path) const {
    save_checkpoint(path, cfg_.topology, net_, learner_, step_);
  }
  void load(const std::filesystem::path& path) {
    step_ = load_checkpoint(path, cfg_.topology, net_, learner_);
  }

  /// Train until cfg.iterations minibatches have been processed in total.
  /// Evaluates at the current step first, then every eval_every minibatches
  /// and after the last one.
  RunMetrics run(const std::function<void(const std::string&)>& log = {}) {
    RunMetrics m;
    m.updates_per_minibatch = cfg_.updates_per_minibatch();
    m.learning_buffer_bytes = learner_.buffer_bytes();
    record_eval(m, log);
    while (step_ < cfg_.iterations) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::vector<double> losses = train_minibatch();
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      ++step_;
      ++m.minibatches;
      m.total_updates += m.updates_per_minibatch;
      m.seconds_per_step.emplace_back(step_, secs / static_cast<double>(steps_per_minibatch()));
      for (std::size_t l = 0; l < losses.size(); ++l) {
        m.train_loss.push_back({step_, static_cast<int>(l), losses[l]});
      }
      if (log) {
        std::string line = "iter " + std::to_string(step_) + " train loss";
        for (double v : losses) line += " " + detail::fmt_double(v).substr(0, 8);
        log(line);
      }
      if (step_ % cfg_.eval_every == 0 || step_ == cfg_.iterations) record_eval(m, log);
      if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) {
        std::filesystem::create_directories(cfg_.out_dir);
        save(std::filesystem::path(cfg_.out_dir) / "checkpoint.bin");
      }
    }
    return m;
  }

  /// Run one minibatch with learning. Returns the mean local task loss of every
  /// layer over the post-burn-in steps.
  std::vector<double> train_minibatch() {
    const int steps = steps_per_minibatch();
    const int burn_in = cfg_.burn_in_steps();
    const double lr = schedule_lr(cfg_.learning.optimizer.lr, step_, cfg_.schedule);
    Rng dropout_rng = derived_rng(cfg_.dropout_seed, static_cast<std::uint64_t>(step_), 1);
    std::vector<double> loss(net_.size(), 0.0);

    std::vector<FrameSequence> frames;
    if (cfg_.task == Task::classification) {
      frames = sample_minibatch(step_);
    } else {
      for (std::size_t l = 0; l < net_.size(); ++l) targets_[l].setZero();
    }

    net_.reset_state();
    for (int k = 0; k < steps; ++k) {
      net_.forward(dropout_rng, true);
      if (k >= burn_in) {
        if (cfg_.task == Task::regression) set_regression_targets(k);
        const auto layer_losses = learner_.compute_gradients(net_, targets_);
        learner_.apply(net_, lr);
        for (std::size_t l = 0; l < loss.size(); ++l) loss[l] += layer_losses[l].task;
      }
      fill_input(frames, k);
      net_.advance(input_);
    }
    const int updates = steps - burn_in;
    if (updates > 0) {
      for (auto& v : loss) v /= updates;
    }
    return loss;
  }

  /// Per-layer loss, error and firing rate on the test split (or the
  /// regression sequence). `readouts`, when given, receives the readout of
  /// every layer over the whole regression sequence.
  std::vector<LayerEval> evaluate(std::vector<std::vector<float>>* readouts = nullptr,
                                  std::vector<std::vector<float>>* targets = nullptr) const {
    return cfg_.task == Task::classification ? evaluate_classification() : evaluate_regression(readouts, targets);
  }

  int steps_per_minibatch() const {
    return cfg_.task == Task::classification ? cfg_.steps(cfg_.train_slice_ms) : cfg_.steps(cfg_.data.duration_ms);
  }

  /// Positions in the training set of the samples of minibatch `iteration`.
  std::vector<std::size_t> minibatch_indices(std::int64_t iteration) {
    const std::size_t n = train_.recordings.size();
    std::vector<std::size_t> out;
    for (int i = 0; i < cfg_.batch_size; ++i) {
      const std::uint64_t g = static_cast<std::uint64_t>(iteration) * cfg_.batch_size + i;
      const std::uint64_t epoch = g / n;
      if (epoch != perm_epoch_ || perm_.size() != n) {
        perm_.resize(n);
        std::iota(perm_.begin(), perm_.end(), std::size_t{0});
        Rng rng = derived_rng(cfg_.data_seed, epoch, 2);
        std::shuffle(perm_.begin(), perm_.end(), rng);
        perm_epoch_ = epoch;
      }
      out.push_back(perm_[g % n]);
    }
    return out;
  }

 private:
  void validate_dataset(const EventDataset& ds, double slice_ms, const char* split) const {
    const Shape3 in = cfg_.topology.input;
    if (in.channels != 2 || in.height != ds.height || in.width != ds.width) {
      throw ConfigError(std::string(split) + " frames are [2, " + std::to_string(ds.height) + ", " +
                        std::to_string(ds.width) + "] but topology.input is [" + std::to_string(in.channels) +
                        ", " + std::to_string(in.height) + ", " + std::to_string(in.width) + "]");
    }
    for (std::size_t l = 0; l < cfg_.topology.layers.size(); ++l) {
      if (cfg_.topology.layers[l].readout < ds.classes) {
        throw ConfigError("layer " + std::to_string(l) + " readout is smaller than the " +
                          std::to_string(ds.classes) + " classes of the " + split + " split");
      }
    }
    for (const auto& r : ds.recordings) {
      if (r.length_ms() < slice_ms) {
        throw SampleTooShortError(r.path + " lasts " + std::to_string(r.length_ms()) + " ms, shorter than the " +
                                  std::to_string(slice_ms) + " ms " + split + " slice");
      }
    }
  }

  std::vector<FrameSequence> sample_minibatch(std::int64_t iteration) {
    const auto idx = minibatch_indices(iteration);
    Rng rng = derived_rng(cfg_.data_seed, static_cast<std::uint64_t>(iteration), 3);
    const int steps = steps_per_minibatch();
    std::vector<FrameSequence> frames;
    for (std::size_t s = 0; s < idx.size(); ++s) {
      const Recording& r = train_.recordings[idx[s]];
      const std::int64_t start_ms = random_slice(cfg_.train_slice_ms, r.length_ms(), rng);
      frames.push_back(bin_to_frames(r.stream, cfg_.neuron.decay.dt, steps, start_ms * 1000));
      for (std::size_t l = 0; l < net_.size(); ++l) {
        targets_[l].row(static_cast<Eigen::Index>(s)).setZero();
        targets_[l](static_cast<Eigen::Index>(s), r.label) = T(1);
      }
    }
    return frames;
  }

  void fill_input(const std::vector<FrameSequence>& frames, int k) {
    if (cfg_.task == Task::regression) {
      const int row = std::min<int>(k, static_cast<int>(regression_.input.rows()) - 1);
      for (Eigen::Index s = 0; s < input_.rows(); ++s) {
        input_.row(s) = regression_.input.row(row).template cast<T>();
      }
      return;
    }
    fill_frame_input(frames, k, input_);
  }

  static void fill_frame_input(const std::vector<FrameSequence>& frames, int k, Matrix<T>& input) {
    for (std::size_t s = 0; s < frames.size(); ++s) {
      const std::uint32_t* f = frames[s].frame(k);
      T* dst = input.row(static_cast<Eigen::Index>(s)).data();
      for (std::int64_t i = 0; i < frames[s].frame_size(); ++i) dst[i] = static_cast<T>(f[i]);
    }
  }

  void set_regression_targets(int k) {
    for (std::size_t l = 0; l < net_.size(); ++l) {
      targets_[l].setConstant(static_cast<T>(regression_.targets[l][static_cast<std::size_t>(k)]));
    }
  }

  Rng eval_rng() const { return derived_rng(cfg_.dropout_seed, static_cast<std::uint64_t>(step_), 4); }

  std::vector<LayerEval> evaluate_classification() const {
    const std::size_t L = net_.size();
    const Eigen::Index batch = cfg_.eval_batch;
    Network<T> net(net_.layers(), batch);
    Rng rng = eval_rng();
    const int steps = cfg_.steps(cfg_.test_slice_ms);
    const int burn_in = cfg_.burn_in_steps();
    const std::size_t n = test_.recordings.size();
    std::vector<LayerEval> out(L);
    std::vector<std::size_t> wrong(L, 0);
    std::vector<double> spikes(L, 0.0);
    std::vector<Matrix<double>> acc(L);
    std::vector<Matrix<T>> target(L);
    Matrix<T> input = Matrix<T>::Zero(batch, net.input_size());
    for (std::size_t first = 0; first < n; first += static_cast<std::size_t>(batch)) {
      const std::size_t used = std::min<std::size_t>(static_cast<std::size_t>(batch), n - first);
      std::vector<FrameSequence> frames;
      for (Eigen::Index s = 0; s < batch; ++s) {
        // a short final batch is padded with copies of its first sample
        const std::size_t i = first + (static_cast<std::size_t>(s) < used ? static_cast<std::size_t>(s) : 0);
        frames.push_back(bin_to_frames(test_.recordings[i].stream, cfg_.neuron.decay.dt, steps, 0));
      }
      for (std::size_t l = 0; l < L; ++l) {
        acc[l] = Matrix<double>::Zero(batch, net.layers()[l].geom.readout);
        target[l] = Matrix<T>::Zero(batch, net.layers()[l].geom.readout);
        for (std::size_t s = 0; s < used; ++s) target[l](s, test_.recordings[first + s].label) = T(1);
      }
      net.reset_state();
      for (int k = 0; k < steps; ++k) {
        net.forward(rng, cfg_.test_dropout);
        if (k >= burn_in) {
          for (std::size_t l = 0; l < L; ++l) {
            const auto& Y = net.readout(l);
            const auto& S = net.spikes(l);
            for (std::size_t s = 0; s < used; ++s) {
              const auto r = static_cast<Eigen::Index>(s);
              acc[l].row(r) += Y.row(r).template cast<double>();
              spikes[l] += static_cast<double>(S.row(r).sum());
              for (Eigen::Index j = 0; j < Y.cols(); ++j) {
                out[l].loss += loss_value(static_cast<double>(Y(r, j) - target[l](r, j)), cfg_.learning.loss);
              }
            }
          }
        }
        fill_frame_input(frames, k, input);
        net.advance(input);
      }
      for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t s = 0; s < used; ++s) {
          const auto row = acc[l].row(static_cast<Eigen::Index>(s));
          std::vector<double> v(row.data(), row.data() + row.size());
          if (argmax_lowest(v) != test_.recordings[first + s].label) ++wrong[l];
        }
      }
    }
    const double sample_steps = static_cast<double>(n) * (steps - burn_in);
    for (std::size_t l = 0; l < L; ++l) {
      out[l].error = static_cast<double>(wrong[l]) / static_cast<double>(n);
      out[l].loss /= sample_steps;
      out[l].firing_rate = spikes[l] / (sample_steps * static_cast<double>(net.layers()[l].geom.n_out()));
    }
    return out;
  }

  std::vector<LayerEval> evaluate_regression(std::vector<std::vector<float>>* readouts,
                                             std::vector<std::vector<float>>* targets) const {
    const std::size_t L = net_.size();
    Network<T> net(net_.layers(), 1);
    Rng rng = eval_rng();
    const int steps = static_cast<int>(regression_.input.rows());
    const int burn_in = cfg_.burn_in_steps();
    std::vector<LayerEval> out(L);
    std::vector<double> sq(L, 0.0);
    if (readouts) readouts->assign(L, std::vector<float>(static_cast<std::size_t>(steps), 0.0f));
    if (targets) targets->assign(L, std::vector<float>(static_cast<std::size_t>(steps), 0.0f));
    for (int k = 0; k < steps; ++k) {
      net.forward(rng, cfg_.test_dropout);
      for (std::size_t l = 0; l < L; ++l) {
        const double target = regression_.targets[l][static_cast<std::size_t>(k)];
        const auto& Y = net.readout(l);
        if (readouts) (*readouts)[l][k] = static_cast<float>(Y(0, 0));
        if (targets) (*targets)[l][k] = static_cast<float>(target);
        if (k < burn_in) continue;
        for (Eigen::Index j = 0; j < Y.cols(); ++j) {
          const double r = static_cast<double>(Y(0, j)) - target;
          out[l].loss += loss_value(r, cfg_.learning.loss);
          sq[l] += r * r;
        }
        out[l].firing_rate += static_cast<double>(net.spikes(l).sum());
      }
      net.advance(regression_.input.row(k).template cast<T>());
    }
    const double n = steps - burn_in;
    for (std::size_t l = 0; l < L; ++l) {
      out[l].loss /= n;
      out[l].error = std::sqrt(sq[l] / (n * static_cast<double>(net.layers()[l].geom.readout)));
      out[l].firing_rate /= n * static_cast<double>(net.layers()[l].geom.n_out());
    }
    return out;
  }

  void record_eval(RunMetrics& m, const std::function<void(const std::string&)>& log) const {
    const bool regression = cfg_.task == Task::regression;
    const auto ev = evaluate(regression ? &m.readout_trace : nullptr, regression ? &m.target_trace : nullptr);
    for (std::size_t l = 0; l < ev.size(); ++l) {
      m.rows.push_back({step_, static_cast<int>(l), ev[l].loss, ev[l].error, ev[l].firing_rate});
    }
    if (log) {
      std::string line = "eval " + std::to_string(step_) + (regression ? " rms" : " error");
      for (const auto& e : ev) line += " " + detail::fmt_double(e.error).substr(0, 8);
      log(line);
    }
  }

  TrainConfig cfg_;
  Network<T> net_;
  Learner<T> learner_;
  EventDataset train_;
  EventDataset test_;
  RegressionTask regression_;
  std::vector<Matrix<T>> targets_;
  Matrix<T> input_;
  std::int64_t step_ = 0;
  std::vector<std::size_t> perm_;
  std::uint64_t perm_epoch_ = ~std::uint64_t{0};
};

/// Train from scratch with `cfg` and write metrics (and a final checkpoint) to cfg.out_dir.
template <typename T = float>
RunMetrics run_training(const TrainConfig& cfg, const std::function<void(const std::string&)>& log = {}) {
  Trainer<T> trainer(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream out(std::filesystem::path(cfg.out_dir) / "config.json");
    if (!out) throw IoError("cannot write to " + cfg.out_dir);
    out << cfg.document.dump(2) << '\n';
  }
  RunMetrics m = trainer.run(log);
  emit_metrics(m, cfg.out_dir, cfg.plot);
  trainer.save(std::filesystem::path(cfg.out_dir) / "checkpoint.bin");
  return m;
}

}  // namespace decolle
