#include "bdfa/cli.hpp"

#include <functional>
#include <iostream>
#include <optional>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "bdfa/experiment.hpp"
#include "bdfa/io.hpp"
#include "bdfa/quant.hpp"
#include "json.hpp"

namespace bdfa {

namespace {

namespace fs = std::filesystem;

// Raw flag storage; a flag only overrides the config when it was given.
struct Flags {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  bool to_stdout = false;

  std::string arch, dataset, data_path, schedule, model, distilled, mode = "bdfa", split = "test", trace_dir;
  std::size_t train_size = 0, test_size = 0, epochs = 0, batch_size = 0, iterations = 0, max_flips = 0, k = 0,
              max_steps = 0, bfa_batch = 0, seeds = 0, jobs = 0;
  double lr = 0, momentum = 0, weight_decay = 0, alpha = 0, beta = 0, floor = 0;
  int bits = 0;
};

class Overrides {
 public:
  template <typename T, typename Apply>
  void add(CLI::App* sub, const std::string& name, T& storage, const std::string& desc, Apply apply) {
    CLI::Option* opt = sub->add_option(name, storage, desc);
    appliers_.push_back([opt, &storage, apply](ExperimentConfig& c) {
      if (opt->count() > 0) apply(c, storage);
    });
  }
  void apply(ExperimentConfig& c) const {
    for (const auto& a : appliers_) a(c);
  }

 private:
  std::vector<std::function<void(ExperimentConfig&)>> appliers_;
};

void add_common(CLI::App* sub, Flags& f, bool stdout_flag = true) {
  sub->add_option("--config", f.config_path, "Experiment config file (TOML-style); flags override it");
  sub->add_option("--seed", f.seed, "Seed for every random stream");
  sub->add_option("--out", f.out, "Output directory");
  if (stdout_flag) sub->add_flag("--stdout", f.to_stdout, "Also write the main data output to stdout");
}

void add_dataset_flags(CLI::App* sub, Flags& f, Overrides& ov) {
  ov.add(sub, "--dataset", f.dataset, "blobs4 | rings2 | cifar",
         [](ExperimentConfig& c, const std::string& v) { c.dataset.name = v; });
  ov.add(sub, "--train-size", f.train_size, "Toy train samples",
         [](ExperimentConfig& c, std::size_t v) { c.dataset.train_size = v; });
  ov.add(sub, "--test-size", f.test_size, "Toy test samples",
         [](ExperimentConfig& c, std::size_t v) { c.dataset.test_size = v; });
  ov.add(sub, "--data-path", f.data_path, "Directory with CIFAR binary files",
         [](ExperimentConfig& c, const std::string& v) { c.dataset.path = v; });
}

void add_train_flags(CLI::App* sub, Flags& f, Overrides& ov) {
  ov.add(sub, "--arch", f.arch, "Victim architecture", [](ExperimentConfig& c, const std::string& v) { c.arch = v; });
  ov.add(sub, "--epochs", f.epochs, "Training epochs", [](ExperimentConfig& c, std::size_t v) { c.train.epochs = v; });
  ov.add(sub, "--batch-size", f.batch_size, "Training batch size",
         [](ExperimentConfig& c, std::size_t v) { c.train.batch_size = v; });
  ov.add(sub, "--lr", f.lr, "Initial learning rate", [](ExperimentConfig& c, double v) { c.train.learning_rate = v; });
  ov.add(sub, "--schedule", f.schedule, "cosine | constant",
         [](ExperimentConfig& c, const std::string& v) { c.train.lr_schedule = v; });
  ov.add(sub, "--momentum", f.momentum, "SGD momentum", [](ExperimentConfig& c, double v) { c.train.momentum = v; });
  ov.add(sub, "--weight-decay", f.weight_decay, "Weight decay",
         [](ExperimentConfig& c, double v) { c.train.weight_decay = v; });
}

void add_distill_flags(CLI::App* sub, Flags& f, Overrides& ov, bool own_batch_flag) {
  if (own_batch_flag)
    ov.add(sub, "--batch-size", f.batch_size, "Distilled batch size",
           [](ExperimentConfig& c, std::size_t v) { c.distill.batch_size = v; });
  ov.add(sub, "--iterations", f.iterations, "Distillation iterations",
         [](ExperimentConfig& c, std::size_t v) { c.distill.iterations = v; });
  ov.add(sub, "--alpha", f.alpha, "Weight of the BN-statistics loss",
         [](ExperimentConfig& c, double v) { c.distill.alpha = v; });
  ov.add(sub, "--beta", f.beta, "Weight of the random-label loss",
         [](ExperimentConfig& c, double v) { c.distill.beta = v; });
  if (own_batch_flag)
    ov.add(sub, "--lr", f.lr, "Adam learning rate", [](ExperimentConfig& c, double v) { c.distill.learning_rate = v; });
}

void add_attack_flags(CLI::App* sub, Flags& f, Overrides& ov) {
  ov.add(sub, "--max-flips", f.max_flips, "Hamming budget C",
         [](ExperimentConfig& c, std::size_t v) { c.attack.max_flips = v; });
  ov.add(sub, "--k", f.k, "Candidate bits per layer",
         [](ExperimentConfig& c, std::size_t v) { c.attack.candidates_per_layer = v; });
  ov.add(sub, "--max-steps", f.max_steps, "Search step cap (0: 2 * max-flips)",
         [](ExperimentConfig& c, std::size_t v) { c.attack.max_steps = v; });
  ov.add(sub, "--accuracy-floor", f.floor, "Stop once accuracy <= floor",
         [](ExperimentConfig& c, double v) { c.attack.accuracy_floor = v; });
  ov.add(sub, "--bfa-batch-size", f.bfa_batch, "Real samples driving BFA",
         [](ExperimentConfig& c, std::size_t v) { c.bfa_batch_size = v; });
}

ExperimentConfig resolve(const Flags& f, const Overrides& ov) {
  ExperimentConfig c = f.config_path.empty() ? ExperimentConfig{}
                                             : ExperimentConfig::from_config(KeyValueConfig::load(f.config_path));
  ov.apply(c);
  return c;
}

fs::path require_path(const std::string& value, const char* flag, const char* cmd) {
  if (value.empty()) throw ConfigError(fmt::format("{}: {} is required", cmd, flag));
  return value;
}

void emit(const Flags& f, const std::string& text) {
  if (f.to_stdout) std::cout << text << std::flush;
}

std::string eval_json(double accuracy, double loss, std::size_t count, const std::string& split) {
  nlohmann::json j = {{"accuracy", accuracy}, {"mean_loss", loss}, {"count", count}, {"split", split}};
  return j.dump(2) + "\n";
}

int cmd_train(const Flags& f, const Overrides& ov) {
  auto cfg = resolve(f, ov);
  cfg.dataset.validate();
  cfg.train.validate();
  const fs::path out = require_path(f.out, "--out", "train");
  auto data = load_dataset(cfg.dataset, f.seed);
  const auto& s = data.train.images.shape();
  auto model = make_architecture(cfg.arch, {s[1], s[2], s[3]}, data.train.num_classes, f.seed);
  TrainConfig tc = cfg.train;
  tc.seed = f.seed;
  auto metrics = train(model, data.train, tc, &data.test);
  std::string csv = "epoch,learning_rate,train_loss,train_accuracy,test_accuracy\n";
  for (const auto& m : metrics)
    csv += fmt::format("{},{:.9g},{:.9g},{:.6f},{:.6f}\n", m.epoch, m.learning_rate, m.train_loss, m.train_accuracy,
                       m.test_accuracy.value_or(0.0));
  save_model(model, out);
  write_text_file(out / "train_metrics.csv", csv);
  fmt::print(stderr, "trained {} on {}: test accuracy {:.4f}\n", cfg.arch, data.train.name,
             metrics.back().test_accuracy.value_or(0.0));
  emit(f, csv);
  return kExitOk;
}

int cmd_quantize(const Flags& f, const Overrides& ov) {
  auto cfg = resolve(f, ov);
  if (cfg.quant_bits < kMinBits || cfg.quant_bits > kMaxBits)
    throw ConfigError(fmt::format("quantize: bits must lie in [{}, {}]", kMinBits, kMaxBits));
  const fs::path model_dir = require_path(f.model, "--model", "quantize");
  const fs::path out = require_path(f.out, "--out", "quantize");
  auto q = quantize_model(load_model(model_dir), cfg.quant_bits);
  save_model(q, out);
  std::string summary;
  for (auto li : q.attackable_layer_indices())
    summary += fmt::format("layer {}: {} weights, delta {:.9g}\n", li, q.layers[li].quant->size(),
                           q.layers[li].quant->delta);
  fmt::print(stderr, "quantized to {} bits: {}\n", cfg.quant_bits, out.string());
  emit(f, summary);
  return kExitOk;
}

int cmd_distill(const Flags& f, const Overrides& ov) {
  auto cfg = resolve(f, ov);
  cfg.distill.seed = f.seed;
  cfg.distill.validate();
  const fs::path model_dir = require_path(f.model, "--model", "distill");
  const fs::path out = require_path(f.out, "--out", "distill");
  auto batch = distill(load_model(model_dir), cfg.distill);
  save_distilled(batch, out);
  fmt::print(stderr, "distilled {} samples: bn_loss {:.6g} -> {:.6g}\n", batch.labels.size(),
             batch.history.front().bn_loss, batch.final_bn_loss);
  emit(f, read_text_file(out / "history.csv"));
  return kExitOk;
}

int cmd_attack(const Flags& f, const Overrides& ov) {
  auto cfg = resolve(f, ov);
  cfg.attack.seed = f.seed;
  cfg.attack.validate();
  if (f.mode != "bdfa" && f.mode != "bfa") throw ConfigError("attack: --mode must be bdfa or bfa");
  const fs::path model_dir = require_path(f.model, "--model", "attack");
  const fs::path out = require_path(f.out, "--out", "attack");
  const bool have_data = !f.dataset.empty() || (!f.config_path.empty() && f.mode == "bfa");
  if (f.mode == "bdfa") require_path(f.distilled, "--distilled", "attack");
  if (f.mode == "bfa" && !have_data) throw ConfigError("attack: --mode bfa needs --dataset");

  ModelGraph model = load_model(model_dir);
  if (!model.quantized()) throw StateError("attack: model in " + model_dir.string() + " is not quantized");
  std::optional<DatasetSplits> data;
  if (have_data) data = load_dataset(cfg.dataset, f.seed);

  AttackBatch batch;
  if (f.mode == "bdfa") {
    auto d = load_distilled(f.distilled);
    if (d.num_classes != model.num_classes)
      throw ConsistencyError(fmt::format("attack: distilled batch has {} classes, model {}", d.num_classes,
                                         model.num_classes));
    batch = {d.x, d.labels};
  } else {
    batch = real_data_batch(data->train, cfg.bfa_batch_size, f.seed);
  }
  AccuracyFn accuracy;
  if (data) accuracy = [&](const ModelGraph& m) { return evaluate(m, data->test).accuracy; };

  AttackTrace trace = run_attack(model, batch, cfg.attack, accuracy, f.mode);
  save_trace(trace, out);
  if (data) {
    auto rows = aggregate_traces(model.arch, data->train.name, f.mode, {&trace}, cfg.attack.max_flips);
    write_aggregate_csv(out / "aggregate.csv", rows);
  }
  fmt::print(stderr, "{}: {} flips, Hamming distance {}, stop: {}\n", f.mode, trace.flips.size(),
             trace.hamming_distance, trace.stop_reason);
  emit(f, read_text_file(out / "trace.csv"));
  return kExitOk;
}

int cmd_evaluate(const Flags& f, const Overrides& ov) {
  auto cfg = resolve(f, ov);
  if (f.split != "test" && f.split != "train") throw ConfigError("evaluate: --split must be test or train");
  const fs::path model_dir = require_path(f.model, "--model", "evaluate");
  auto model = load_model(model_dir);
  auto data = load_dataset(cfg.dataset, f.seed);
  auto r = evaluate(model, f.split == "test" ? data.test : data.train);
  const std::string j = eval_json(r.accuracy, r.mean_loss, r.count, f.split);
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_text_file(fs::path(f.out) / "eval.json", j);
  }
  fmt::print(stderr, "accuracy {:.4f} ({} samples), mean loss {:.6g}\n", r.accuracy, r.count, r.mean_loss);
  emit(f, j);
  return kExitOk;
}

int cmd_experiment(const Flags& f, const Overrides& ov, bool seed_given) {
  auto cfg = resolve(f, ov);
  if (seed_given) cfg.base_seed = f.seed;
  cfg.validate();
  const fs::path out = require_path(f.out, "--out", "experiment");
  auto summary = run_experiment(cfg, out);
  std::size_t failed = 0;
  for (const auto& s : summary.seeds) failed += !s.ok;
  fmt::print(stderr, "experiment: {} seeds, {} failed, results in {}\n", summary.seeds.size(), failed, out.string());
  emit(f, format_aggregate_csv(summary.aggregate));
  if (failed == summary.seeds.size()) throw StateError("experiment: every seed failed");
  return kExitOk;
}

int cmd_report(const Flags& f) {
  const fs::path dir = require_path(f.trace_dir, "TRACE_DIR", "report");
  const fs::path out = f.out.empty() ? dir : fs::path(f.out);
  auto art = write_report(dir, out);
  fmt::print(stderr, "report written to {}\n", out.string());
  emit(f, art.markdown);
  return kExitOk;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int cli_dispatch(int argc, char** argv) {
  CLI::App app{"Bit-flip attacks on quantized CNNs with distilled (blind) data", "bdfa"};
  app.require_subcommand(1, 1);
  Flags f;
  Overrides ov;

  auto* train_cmd = app.add_subcommand("train", "Train a desk-scale victim");
  add_common(train_cmd, f);
  add_dataset_flags(train_cmd, f, ov);
  add_train_flags(train_cmd, f, ov);

  auto* quant_cmd = app.add_subcommand("quantize", "Quantize a trained model's weights");
  add_common(quant_cmd, f);
  quant_cmd->add_option("--model", f.model, "Model directory");
  ov.add(quant_cmd, "--bits", f.bits, "Bit width q", [](ExperimentConfig& c, int v) { c.quant_bits = v; });

  auto* distill_cmd = app.add_subcommand("distill", "Synthesize a batch from BN statistics");
  add_common(distill_cmd, f);
  distill_cmd->add_option("--model", f.model, "Model directory");
  add_distill_flags(distill_cmd, f, ov, true);

  auto* attack_cmd = app.add_subcommand("attack", "Progressive bit search on a quantized model");
  add_common(attack_cmd, f);
  attack_cmd->add_option("--mode", f.mode, "bdfa (distilled data) | bfa (real data)");
  attack_cmd->add_option("--model", f.model, "Quantized model directory");
  attack_cmd->add_option("--distilled", f.distilled, "Distilled batch directory (bdfa)");
  add_dataset_flags(attack_cmd, f, ov);
  add_attack_flags(attack_cmd, f, ov);

  auto* eval_cmd = app.add_subcommand("evaluate", "Top-1 accuracy and mean loss");
  add_common(eval_cmd, f);
  eval_cmd->add_option("--model", f.model, "Model directory");
  eval_cmd->add_option("--split", f.split, "test | train");
  add_dataset_flags(eval_cmd, f, ov);

  auto* exp_cmd = app.add_subcommand("experiment", "Full pipeline over several seeds");
  add_common(exp_cmd, f);
  ov.add(exp_cmd, "--seeds", f.seeds, "Number of seeds", [](ExperimentConfig& c, std::size_t v) { c.seeds = v; });
  ov.add(exp_cmd, "--jobs", f.jobs, "Seeds run concurrently", [](ExperimentConfig& c, std::size_t v) { c.jobs = v; });
  add_dataset_flags(exp_cmd, f, ov);
  add_train_flags(exp_cmd, f, ov);
  add_distill_flags(exp_cmd, f, ov, false);
  add_attack_flags(exp_cmd, f, ov);

  auto* report_cmd = app.add_subcommand("report", "SVG chart and markdown table from aggregate.csv");
  report_cmd->add_option("trace_dir", f.trace_dir, "Directory holding aggregate.csv")->required();
  report_cmd->add_option("--out", f.out, "Output directory (default: the trace directory)");
  report_cmd->add_flag("--stdout", f.to_stdout, "Also print the markdown table to stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    std::cerr << "error: usage error: " << one_line(e.what()) << "\n";
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(f, ov);
    if (quant_cmd->parsed()) return cmd_quantize(f, ov);
    if (distill_cmd->parsed()) return cmd_distill(f, ov);
    if (attack_cmd->parsed()) return cmd_attack(f, ov);
    if (eval_cmd->parsed()) return cmd_evaluate(f, ov);
    if (exp_cmd->parsed()) return cmd_experiment(f, ov, exp_cmd->get_option("--seed")->count() > 0);
    if (report_cmd->parsed()) return cmd_report(f);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime error: " << one_line(e.what()) << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

int cli_dispatch(const std::vector<std::string>& args) {
  std::vector<std::string> storage;
  storage.reserve(args.size() + 1);
  storage.emplace_back("bdfa");
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  argv.push_back(nullptr);
  return cli_dispatch(static_cast<int>(storage.size()), argv.data());
}

}  // namespace bdfa
