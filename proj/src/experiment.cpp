#include "bdfa/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <numeric>
#include <thread>

#include <fmt/format.h>

#include "bdfa/io.hpp"
#include "bdfa/quant.hpp"
#include "bdfa/rng.hpp"
#include "json.hpp"

namespace bdfa {

using nlohmann::json;

void DatasetSpec::validate() const {
  if (name == "cifar") {
    if (path.empty()) throw ConfigError("dataset: name 'cifar' needs dataset.path");
    return;
  }
  const auto toys = toy_dataset_names();
  if (std::find(toys.begin(), toys.end(), name) == toys.end())
    throw ConfigError("dataset: unknown name '" + name + "' (blobs4, rings2, cifar)");
  if (train_size < 1 || test_size < 1) throw ConfigError("dataset: train_size and test_size must be >= 1");
}

DatasetSplits load_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.name == "cifar") return load_cifar(spec.path);
  return load_toy_splits(spec.name, spec.train_size, spec.test_size, seed);
}

void ExperimentConfig::validate() const {
  if (seeds < 1) throw ConfigError("experiment: seeds must be >= 1");
  if (jobs < 1) throw ConfigError("experiment: jobs must be >= 1");
  dataset.validate();
  const auto archs = architecture_names();
  if (std::find(archs.begin(), archs.end(), arch) == archs.end())
    throw ConfigError("model: unknown arch '" + arch + "'");
  train.validate();
  if (quant_bits < kMinBits || quant_bits > kMaxBits)
    throw ConfigError(fmt::format("quantize: bits must lie in [{}, {}]", kMinBits, kMaxBits));
  distill.validate();
  attack.validate();
  if (modes.empty()) throw ConfigError("attack: modes must not be empty");
  for (const auto& m : modes)
    if (m != "bdfa" && m != "bfa") throw ConfigError("attack: unknown mode '" + m + "' (bdfa, bfa)");
  if (bfa_batch_size < 1) throw ConfigError("attack: bfa_batch_size must be >= 1");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("attack: threshold must lie in [0, 1]");
}

namespace {

std::size_t get_size(const KeyValueConfig& kv, const std::string& sec, const std::string& key, std::size_t fallback) {
  const long long v = kv.get_int(sec, key, static_cast<long long>(fallback));
  if (v < 0) throw ConfigError(fmt::format("{}.{} must be >= 0", sec, key));
  return static_cast<std::size_t>(v);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_config(const KeyValueConfig& kv) {
  kv.require_known({"seeds", "base_seed", "jobs", "dataset.name", "dataset.train_size", "dataset.test_size",
                    "dataset.path", "model.arch", "train.epochs", "train.batch_size", "train.learning_rate",
                    "train.lr_schedule", "train.momentum", "train.weight_decay", "quantize.bits",
                    "distill.batch_size", "distill.iterations", "distill.alpha", "distill.beta",
                    "distill.learning_rate", "attack.modes", "attack.max_flips", "attack.candidates_per_layer",
                    "attack.max_steps", "attack.accuracy_floor", "attack.bfa_batch_size", "attack.threshold"});
  ExperimentConfig c;
  c.seeds = get_size(kv, "", "seeds", c.seeds);
  c.base_seed = get_size(kv, "", "base_seed", c.base_seed);
  c.jobs = get_size(kv, "", "jobs", c.jobs);
  c.dataset.name = kv.get_string("dataset", "name", c.dataset.name);
  c.dataset.train_size = get_size(kv, "dataset", "train_size", c.dataset.train_size);
  c.dataset.test_size = get_size(kv, "dataset", "test_size", c.dataset.test_size);
  c.dataset.path = kv.get_string("dataset", "path", c.dataset.path);
  c.arch = kv.get_string("model", "arch", c.arch);
  c.train.epochs = get_size(kv, "train", "epochs", c.train.epochs);
  c.train.batch_size = get_size(kv, "train", "batch_size", c.train.batch_size);
  c.train.learning_rate = kv.get_double("train", "learning_rate", c.train.learning_rate);
  c.train.lr_schedule = kv.get_string("train", "lr_schedule", c.train.lr_schedule);
  c.train.momentum = kv.get_double("train", "momentum", c.train.momentum);
  c.train.weight_decay = kv.get_double("train", "weight_decay", c.train.weight_decay);
  c.quant_bits = static_cast<int>(kv.get_int("quantize", "bits", c.quant_bits));
  c.distill.batch_size = get_size(kv, "distill", "batch_size", c.distill.batch_size);
  c.distill.iterations = get_size(kv, "distill", "iterations", c.distill.iterations);
  c.distill.alpha = kv.get_double("distill", "alpha", c.distill.alpha);
  c.distill.beta = kv.get_double("distill", "beta", c.distill.beta);
  c.distill.learning_rate = kv.get_double("distill", "learning_rate", c.distill.learning_rate);
  c.modes = kv.get_list("attack", "modes", c.modes);
  c.attack.max_flips = get_size(kv, "attack", "max_flips", c.attack.max_flips);
  c.attack.candidates_per_layer = get_size(kv, "attack", "candidates_per_layer", c.attack.candidates_per_layer);
  c.attack.max_steps = get_size(kv, "attack", "max_steps", c.attack.max_steps);
  if (kv.has("attack", "accuracy_floor")) c.attack.accuracy_floor = kv.get_double("attack", "accuracy_floor", 0.0);
  c.bfa_batch_size = get_size(kv, "attack", "bfa_batch_size", c.bfa_batch_size);
  c.threshold = kv.get_double("attack", "threshold", c.threshold);
  c.validate();
  return c;
}

std::string ExperimentConfig::to_text() const {
  std::string modes_list;
  for (const auto& m : modes) modes_list += (modes_list.empty() ? "\"" : ", \"") + m + "\"";
  std::string s;
  s += fmt::format("seeds = {}\nbase_seed = {}\njobs = {}\n", seeds, base_seed, jobs);
  s += fmt::format("\n[dataset]\nname = \"{}\"\ntrain_size = {}\ntest_size = {}\n", dataset.name, dataset.train_size,
                   dataset.test_size);
  if (!dataset.path.empty()) s += fmt::format("path = \"{}\"\n", dataset.path);
  s += fmt::format("\n[model]\narch = \"{}\"\n", arch);
  s += fmt::format(
      "\n[train]\nepochs = {}\nbatch_size = {}\nlearning_rate = {}\nlr_schedule = \"{}\"\nmomentum = {}\n"
      "weight_decay = {}\n",
      train.epochs, train.batch_size, train.learning_rate, train.lr_schedule, train.momentum, train.weight_decay);
  s += fmt::format("\n[quantize]\nbits = {}\n", quant_bits);
  s += fmt::format("\n[distill]\nbatch_size = {}\niterations = {}\nalpha = {}\nbeta = {}\nlearning_rate = {}\n",
                   distill.batch_size, distill.iterations, distill.alpha, distill.beta, distill.learning_rate);
  s += fmt::format(
      "\n[attack]\nmodes = [{}]\nmax_flips = {}\ncandidates_per_layer = {}\nmax_steps = {}\nbfa_batch_size = {}\n"
      "threshold = {}\n",
      modes_list, attack.max_flips, attack.candidates_per_layer, attack.max_steps, bfa_batch_size, threshold);
  if (attack.accuracy_floor) s += fmt::format("accuracy_floor = {}\n", *attack.accuracy_floor);
  return s;
}

Victim build_victim(const ExperimentConfig& cfg, std::uint64_t seed) {
  Victim v;
  v.data = load_dataset(cfg.dataset, seed);
  const auto& shape = v.data.train.images.shape();
  v.float_model = make_architecture(cfg.arch, {shape[1], shape[2], shape[3]}, v.data.train.num_classes, seed);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  v.train_metrics = train(v.float_model, v.data.train, tc);
  v.float_accuracy = evaluate(v.float_model, v.data.test).accuracy;
  v.quantized = quantize_model(v.float_model, cfg.quant_bits);
  v.quantized_accuracy = evaluate(v.quantized, v.data.test).accuracy;
  return v;
}

AttackBatch real_data_batch(const Dataset& train, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = make_rng(seed, RngStream::attack_batch);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, idx.size()));
  return {train.gather(idx), train.gather_labels(idx)};
}

namespace {

std::mutex log_mutex;

void log_line(const std::string& s) {
  std::lock_guard<std::mutex> lock(log_mutex);
  fmt::print(stderr, "{}\n", s);
}

std::string metrics_csv(const std::vector<EpochMetrics>& metrics) {
  std::string s = "epoch,learning_rate,train_loss,train_accuracy\n";
  for (const auto& m : metrics)
    s += fmt::format("{},{:.9g},{:.9g},{:.6f}\n", m.epoch, m.learning_rate, m.train_loss, m.train_accuracy);
  return s;
}

}  // namespace

SeedOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir) {
  SeedOutcome out;
  out.seed = seed;
  const bool persist = !dir.empty();
  std::string stage = "train";
  try {
    Victim v = build_victim(cfg, seed);
    out.float_accuracy = v.float_accuracy;
    out.quantized_accuracy = v.quantized_accuracy;
    log_line(fmt::format("seed {}: float accuracy {:.4f}, quantized {:.4f}", seed, v.float_accuracy,
                         v.quantized_accuracy));
    if (persist) {
      std::filesystem::create_directories(dir);
      write_text_file(dir / "train_metrics.csv", metrics_csv(v.train_metrics));
      save_model(v.float_model, dir / "model");
      save_model(v.quantized, dir / "model_q");
    }

    std::optional<DistilledBatch> distilled;
    const auto accuracy = [&](const ModelGraph& m) { return evaluate(m, v.data.test).accuracy; };
    for (const auto& mode : cfg.modes) {
      AttackBatch batch;
      if (mode == "bdfa") {
        if (!distilled) {
          stage = "distill";
          DistillConfig dc = cfg.distill;
          dc.seed = seed;
          distilled = distill(v.quantized, dc);
          out.distill_initial_bn_loss = distilled->history.front().bn_loss;
          out.distill_final_bn_loss = distilled->final_bn_loss;
          log_line(fmt::format("seed {}: distilled bn_loss {:.6g} -> {:.6g}", seed, *out.distill_initial_bn_loss,
                               *out.distill_final_bn_loss));
          if (persist) save_distilled(*distilled, dir / "distilled");
        }
        batch = {distilled->x, distilled->labels};
      } else {
        batch = real_data_batch(v.data.train, cfg.bfa_batch_size, seed);
      }
      stage = "attack:" + mode;
      AttackConfig ac = cfg.attack;
      ac.seed = seed;
      ModelGraph victim = v.quantized;
      AttackTrace trace = run_attack(victim, batch, ac, accuracy, mode);
      log_line(fmt::format("seed {}: {} {} flips, accuracy {:.4f} -> {:.4f} ({})", seed, mode, trace.flips.size(),
                           trace.initial_accuracy.value_or(0.0),
                           trace.accuracy_series.empty() ? trace.initial_accuracy.value_or(0.0)
                                                         : trace.accuracy_series.back(),
                           trace.stop_reason));
      if (persist) save_trace(trace, dir / ("attack_" + mode));
      out.traces.emplace(mode, std::move(trace));
    }
  } catch (const std::exception& e) {
    out.ok = false;
    out.failed_stage = stage;
    out.error = e.what();
    log_line(fmt::format("seed {}: {} failed: {}", seed, stage, e.what()));
  }
  return out;
}

std::vector<AggregateRow> aggregate_traces(const std::string& network, const std::string& dataset,
                                           const std::string& mode, const std::vector<const AttackTrace*>& traces,
                                           std::size_t max_flips) {
  std::vector<AggregateRow> rows;
  std::vector<const AttackTrace*> usable;
  for (const auto* t : traces)
    if (t && t->initial_accuracy) usable.push_back(t);
  if (usable.empty()) return rows;
  for (std::size_t f = 0; f <= max_flips; ++f) {
    AggregateRow r{network, dataset, mode, f, usable.size(), 0.0, 1e300, -1e300};
    double sum = 0.0;
    for (const auto* t : usable) {
      double acc = *t->initial_accuracy;
      if (f > 0 && !t->accuracy_series.empty()) acc = t->accuracy_series[std::min(f, t->accuracy_series.size()) - 1];
      sum += acc;
      r.min = std::min(r.min, acc);
      r.max = std::max(r.max, acc);
    }
    r.mean = sum / static_cast<double>(usable.size());
    // Keep min <= mean <= max under summation rounding.
    r.mean = std::clamp(r.mean, r.min, r.max);
    rows.push_back(r);
  }
  return rows;
}

namespace {

json outcome_json(const SeedOutcome& o, const ExperimentConfig& cfg) {
  json j = {{"seed", o.seed},
            {"ok", o.ok},
            {"failed_stage", o.failed_stage},
            {"error", o.error},
            {"float_accuracy", o.float_accuracy},
            {"quantized_accuracy", o.quantized_accuracy}};
  j["distill_initial_bn_loss"] = o.distill_initial_bn_loss ? json(*o.distill_initial_bn_loss) : json(nullptr);
  j["distill_final_bn_loss"] = o.distill_final_bn_loss ? json(*o.distill_final_bn_loss) : json(nullptr);
  json modes = json::object();
  for (const auto& [mode, t] : o.traces) {
    auto reach = flips_to_accuracy(t, cfg.threshold);
    modes[mode] = {{"flips", t.flips.size()},
                   {"hamming_distance", t.hamming_distance},
                   {"final_accuracy", t.accuracy_series.empty() ? t.initial_accuracy.value_or(0.0)
                                                                : t.accuracy_series.back()},
                   {"flips_to_threshold", reach ? json(*reach) : json(nullptr)},
                   {"stop_reason", t.stop_reason}};
  }
  j["modes"] = modes;
  return j;
}

}  // namespace

ExperimentSummary run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  cfg.validate();
  std::filesystem::create_directories(out);
  write_text_file(out / "config.toml", cfg.to_text());

  ExperimentSummary summary;
  summary.seeds.resize(cfg.seeds);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cfg.seeds; i = next++) {
      const std::uint64_t seed = cfg.base_seed + i;
      summary.seeds[i] = run_seed(cfg, seed, out / fmt::format("seed_{}", seed));
    }
  };
  const std::size_t n_threads = std::min(cfg.jobs, cfg.seeds);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (const auto& mode : cfg.modes) {
    std::vector<const AttackTrace*> traces;
    for (const auto& o : summary.seeds) {
      auto it = o.traces.find(mode);
      if (it != o.traces.end()) traces.push_back(&it->second);
    }
    auto rows = aggregate_traces(cfg.arch, cfg.dataset.name, mode, traces, cfg.attack.max_flips);
    summary.aggregate.insert(summary.aggregate.end(), rows.begin(), rows.end());
  }
  write_aggregate_csv(out / "aggregate.csv", summary.aggregate);

  json seeds = json::array();
  for (const auto& o : summary.seeds) seeds.push_back(outcome_json(o, cfg));
  json modes = json::object();
  for (const auto& mode : cfg.modes) {
    // Seeds that never reach the threshold count as max_flips + 1.
    double total = 0.0;
    std::size_t n = 0, reached = 0;
    for (const auto& o : summary.seeds) {
      auto it = o.traces.find(mode);
      if (it == o.traces.end()) continue;
      auto r = flips_to_accuracy(it->second, cfg.threshold);
      total += r ? static_cast<double>(*r) : static_cast<double>(cfg.attack.max_flips + 1);
      reached += r.has_value();
      ++n;
    }
    modes[mode] = {{"runs", n},
                   {"reached_threshold", reached},
                   {"mean_flips_to_threshold", n ? json(total / static_cast<double>(n)) : json(nullptr)}};
  }
  json report = {{"format", "bdfa-experiment"},
                 {"format_version", 1},
                 {"network", cfg.arch},
                 {"dataset", cfg.dataset.name},
                 {"seeds", seeds},
                 {"threshold", cfg.threshold},
                 {"max_flips", cfg.attack.max_flips},
                 {"modes", modes}};
  write_text_file(out / "report.json", report.dump(2) + "\n");
  if (!summary.aggregate.empty()) {
    auto art = render_report(summary.aggregate);
    write_text_file(out / "report.svg", art.svg);
    write_text_file(out / "report.md", art.markdown);
  }
  return summary;
}

}  // namespace bdfa
