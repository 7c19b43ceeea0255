// Command-line front end: train, eval, gradcheck, inspect-data, synth.
//
// Exit codes: 0 success, 1 a check failed, 2 bad usage or config, 3 data or I/O error.

#include "CLI11.hpp"
#include "decolle/decolle.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace decolle;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::string precision = "float";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file (defaults apply to missing keys)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Sets the parameter, data and dropout seeds");
  cmd->add_option("--out", c.out, "Output directory (output.dir)");
  cmd->add_option("--override", c.overrides, "key=value with a dotted key, repeatable")->allow_extra_args(false);
  cmd->add_option("--precision", c.precision, "Scalar type")->check(CLI::IsMember({"float", "double"}));
}

TrainConfig resolve(const Common& c) {
  std::vector<std::string> ov = c.overrides;
  if (c.seed) {
    for (const char* k : {"seeds.params", "seeds.data", "seeds.dropout"}) ov.push_back(std::string(k) + "=" + std::to_string(*c.seed));
  }
  if (!c.out.empty()) ov.push_back("output.dir=" + json(c.out).dump());
  return c.config.empty() ? parse_config(json::object(), ov) : load_config(c.config, ov);
}

void log_line(const std::string& s) { std::cout << s << std::endl; }

template <typename T>
int train(const TrainConfig& cfg, const std::string& resume) {
  Trainer<T> trainer(cfg);
  if (!resume.empty()) {
    trainer.load(resume);
    log_line("resumed at minibatch " + std::to_string(trainer.step()));
  }
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream out(fs::path(cfg.out_dir) / "config.json");
    if (!out) throw IoError("cannot write to " + cfg.out_dir);
    out << cfg.document.dump(2) << '\n';
  }
  const RunMetrics m = trainer.run(log_line);
  emit_metrics(m, cfg.out_dir, cfg.plot);
  trainer.save(fs::path(cfg.out_dir) / "checkpoint.bin");
  log_line("wrote " + cfg.out_dir);
  return 0;
}

template <typename T>
int eval(const TrainConfig& cfg, const std::string& checkpoint) {
  Trainer<T> trainer(cfg);
  const std::string path = checkpoint.empty() ? (fs::path(cfg.out_dir) / "checkpoint.bin").string() : checkpoint;
  if (checkpoint.empty() && !fs::exists(path)) {
    log_line("no checkpoint at " + path + ", evaluating initial parameters");
  } else {
    trainer.load(path);
  }
  const auto ev = trainer.evaluate();
  fs::create_directories(cfg.out_dir);
  std::ofstream csv(fs::path(cfg.out_dir) / "eval.csv");
  if (!csv) throw IoError("cannot write to " + cfg.out_dir);
  csv << "layer,loss,error,firing_rate\n";
  const char* what = cfg.task == Task::regression ? "rms" : "error";
  for (std::size_t l = 0; l < ev.size(); ++l) {
    csv << l << ',' << detail::fmt_double(ev[l].loss) << ',' << detail::fmt_double(ev[l].error) << ','
        << detail::fmt_double(ev[l].firing_rate) << '\n';
    std::cout << "layer " << l << " loss " << ev[l].loss << ' ' << what << ' ' << ev[l].error << " rate "
              << ev[l].firing_rate << '\n';
  }
  return 0;
}

int gradcheck(const std::string& out) {
  const auto suite = standard_gradcheck_suite();
  bool ok = true;
  std::ofstream csv;
  if (!out.empty()) {
    fs::create_directories(out);
    csv.open(fs::path(out) / "gradcheck.csv");
    if (!csv) throw IoError("cannot write to " + out);
    csv << "name,checked,excluded,max_rel_error,worst,forward_mismatch,pass\n";
  }
  for (const auto& c : suite) {
    const OracleReport r = fd_gradient_check(c);
    const bool pass = r.pass && r.excluded_fraction() < 0.05;
    ok = ok && pass;
    std::cout << std::left << std::setw(22) << r.name << " checked " << std::setw(5) << r.n_checked << " excluded "
              << std::setw(4) << r.n_excluded << " max_rel " << std::scientific << std::setprecision(3)
              << r.max_rel_error << std::defaultfloat << " at " << r.worst << (pass ? "  ok" : "  FAIL") << '\n';
    if (csv) {
      csv << r.name << ',' << r.n_checked << ',' << r.n_excluded << ',' << detail::fmt_double(r.max_rel_error) << ','
          << r.worst << ',' << detail::fmt_double(r.forward_mismatch) << ',' << (pass ? 1 : 0) << '\n';
    }
  }
  std::cout << (ok ? "all gradient checks passed" : "gradient check failed") << '\n';
  return ok ? 0 : 1;
}

void describe_stream(const EventStream& s) {
  std::size_t on = 0;
  for (const auto& e : s.events) on += e.polarity == Polarity::on;
  std::cout << "sensor " << s.width << "x" << s.height << ", " << s.events.size() << " events (" << on << " on), "
            << "span " << static_cast<double>(s.duration_us()) / 1000.0 << " ms, last at "
            << static_cast<double>(s.end_us()) / 1000.0 << " ms, skipped records " << s.skipped << '\n';
}

void describe_split(const std::string& split, const EventDataset& ds, double slice_ms) {
  std::map<int, int> per_class;
  double min_len = 1e300, total_len = 0, total_events = 0;
  int short_count = 0;
  for (const auto& r : ds.recordings) {
    ++per_class[r.label];
    min_len = std::min(min_len, r.length_ms());
    total_len += r.length_ms();
    total_events += static_cast<double>(r.stream.events.size());
    short_count += r.length_ms() < slice_ms;
  }
  const double n = static_cast<double>(ds.recordings.size());
  std::cout << split << ": " << ds.recordings.size() << " recordings, sensor " << ds.width << "x" << ds.height
            << ", classes " << ds.classes << ", mean length " << total_len / n << " ms (min " << min_len
            << "), mean events " << total_events / n << ", shorter than the " << slice_ms << " ms slice: "
            << short_count << '\n';
  std::cout << "  per class:";
  for (const auto& [label, count] : per_class) std::cout << ' ' << label << ':' << count;
  std::cout << '\n';
}

int inspect_data(const TrainConfig& cfg, const std::string& file) {
  if (!file.empty()) {
    describe_stream(load_event_file(file));
    return 0;
  }
  if (cfg.task == Task::regression) {
    const auto task = poisson_regression_task(cfg.data.n_in, cfg.data.rate_hz, cfg.steps(cfg.data.duration_ms),
                                              cfg.data_seed, cfg.neuron.decay.dt, {cfg.data.fast_hz, cfg.data.slow_hz});
    const double rate = task.input.cast<double>().mean() / (cfg.neuron.decay.dt * 1e-3);
    std::cout << "regression: " << task.input.cols() << " inputs, " << task.input.rows() << " steps, measured rate "
              << rate << " Hz (configured " << cfg.data.rate_hz << ")\n";
    return 0;
  }
  describe_split(cfg.data.train_split, load_event_dataset(cfg.data, cfg.data.train_split, cfg.data.max_train),
                 cfg.train_slice_ms);
  describe_split(cfg.data.test_split, load_event_dataset(cfg.data, cfg.data.test_split, cfg.data.max_test),
                 cfg.test_slice_ms);
  return 0;
}

int synth(const std::string& kind, const std::string& out, int train_per_class, int test_per_class,
          std::uint64_t seed, double duration_ms) {
  SynthDatasetSpec spec;
  spec.kind = kind == "digits" ? SynthKind::digits : SynthKind::gesture;
  spec.train_per_class = train_per_class;
  spec.test_per_class = test_per_class;
  spec.seed = seed;
  if (spec.kind == SynthKind::digits) spec.recording = SynthSpec{300, 0.7, 0.5};
  if (duration_ms > 0) spec.recording.duration_ms = duration_ms;
  const auto rows = write_synthetic_dataset(out, spec);
  std::cout << "wrote " << rows.size() << " recordings to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DECOLLE spiking network trainer"};
  app.require_subcommand(1);

  Common train_opts, eval_opts, inspect_opts;
  std::string resume, checkpoint, file, gradcheck_out;
  std::string synth_kind = "gesture", synth_out;
  int synth_train = 10, synth_test = 5;
  std::uint64_t synth_seed = 1;
  double synth_ms = 0;

  auto* train_cmd = app.add_subcommand("train", "Train a network and write metrics, plots and a checkpoint");
  add_common(train_cmd, train_opts);
  train_cmd->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(eval_cmd, eval_opts);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file (default <out>/checkpoint.bin)");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  grad_cmd->add_option("--out", gradcheck_out, "Directory for gradcheck.csv");

  auto* inspect_cmd = app.add_subcommand("inspect-data", "Summarize a dataset or a single event file");
  add_common(inspect_cmd, inspect_opts);
  inspect_cmd->add_option("--file", file, "Single event file")->check(CLI::ExistingFile);

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic event dataset with a manifest");
  synth_cmd->add_option("--kind", synth_kind, "gesture or digits")->check(CLI::IsMember({"gesture", "digits"}));
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--train-per-class", synth_train)->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--test-per-class", synth_test)->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--seed", synth_seed);
  synth_cmd->add_option("--duration-ms", synth_ms, "Recording length (default per kind)")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) {
      const TrainConfig cfg = resolve(train_opts);
      return train_opts.precision == "double" ? train<double>(cfg, resume) : train<float>(cfg, resume);
    }
    if (*eval_cmd) {
      const TrainConfig cfg = resolve(eval_opts);
      return eval_opts.precision == "double" ? eval<double>(cfg, checkpoint) : eval<float>(cfg, checkpoint);
    }
    if (*grad_cmd) return gradcheck(gradcheck_out);
    if (*inspect_cmd) return inspect_data(resolve(inspect_opts), file);
    if (*synth_cmd) return synth(synth_kind, synth_out, synth_train, synth_test, synth_seed, synth_ms);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const TopologyMismatchError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
