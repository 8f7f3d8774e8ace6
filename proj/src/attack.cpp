#include "bdfa/attack.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include <fmt/format.h>

#include "bdfa/io.hpp"
#include "json.hpp"

namespace bdfa {

using nlohmann::json;

void AttackConfig::validate() const {
  if (max_flips < 1) throw ConfigError("attack: max_flips must be >= 1");
  if (candidates_per_layer < 1) throw ConfigError("attack: candidates_per_layer must be >= 1");
  if (accuracy_floor && !(*accuracy_floor >= 0.0 && *accuracy_floor <= 1.0))
    throw ConfigError("attack: accuracy_floor must lie in [0, 1]");
}

double batch_loss(const ModelGraph& model, const AttackBatch& batch) {
  auto r = forward(model, batch.x);
  return ops::softmax_cross_entropy(r.logits, batch.labels).item();
}

std::vector<BitAddress> rank_bits_in_layer(const QuantizedLayer& layer, std::size_t layer_index,
                                           std::span<const double> bit_grads, std::size_t k) {
  const int q = layer.bits;
  if (bit_grads.size() != layer.codes.size() * q)
    throw QuantizationError(fmt::format("rank_bits_in_layer: {} bit gradients for {} weights x {} bits",
                                        bit_grads.size(), layer.codes.size(), q));
  struct Candidate {
    double magnitude;
    std::size_t weight;
    int bit;
  };
  std::vector<Candidate> valid;
  for (std::size_t w = 0; w < layer.codes.size(); ++w) {
    for (int i = 0; i < q; ++i) {
      const double g = bit_grads[w * q + i];
      // Flipping b changes it by (1 - 2b); first-order loss change g * (1 - 2b).
      const int b = bit_value(layer.codes[w], i, q);
      if (g * (1 - 2 * b) > 0.0) valid.push_back({std::fabs(g), w, i});
    }
  }
  auto better = [](const Candidate& a, const Candidate& b) {
    if (a.magnitude != b.magnitude) return a.magnitude > b.magnitude;
    if (a.weight != b.weight) return a.weight < b.weight;
    return a.bit < b.bit;
  };
  const std::size_t take = std::min(k, valid.size());
  std::partial_sort(valid.begin(), valid.begin() + take, valid.end(), better);
  std::vector<BitAddress> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back({layer_index, valid[i].weight, valid[i].bit});
  return out;
}

FlipRecord progressive_search_step(ModelGraph& model, const AttackBatch& batch, const AttackConfig& cfg,
                                   SearchStepStats* stats) {
  if (!model.quantized()) throw StateError("progressive_search_step: model is not quantized");
  if (batch.labels.empty()) throw ConfigError("progressive_search_step: empty attack batch");

  // Gradient of the batch loss w.r.t. the dequantized weights.
  auto fwd = forward(model, batch.x, {.mode = ForwardMode::eval, .weight_grads = true});
  auto loss = ops::softmax_cross_entropy(fwd.logits, batch.labels);
  backward(loss);
  const double loss_before = loss.item();

  std::vector<BitAddress> candidates;
  for (auto li : model.attackable_layer_indices()) {
    const auto& w = fwd.params[li].weight;
    if (!w.has_grad()) continue;
    const auto grads = bit_gradients(*model.layers[li].quant, w.grad());
    auto top = rank_bits_in_layer(*model.layers[li].quant, li, grads, cfg.candidates_per_layer);
    candidates.insert(candidates.end(), top.begin(), top.end());
  }
  if (candidates.empty()) throw StallError("no candidate bit in any layer");

  std::optional<BitAddress> best;
  double best_loss = -std::numeric_limits<double>::infinity();
  SearchStepStats local;
  for (const auto& c : candidates) {
    apply_flip(model, c);
    double l = std::numeric_limits<double>::quiet_NaN();
    try {
      l = batch_loss(model, batch);
    } catch (const NonFiniteError&) {
    }
    apply_flip(model, c);  // undo
    ++local.evaluations;
    if (!std::isfinite(l)) {
      ++local.discarded;
      std::cerr << fmt::format("warning: discarded candidate layer {} weight {} bit {} (non-finite loss)\n",
                               c.layer, c.weight_index, c.bit);
      continue;
    }
    if (l > best_loss) {
      best_loss = l;
      best = c;
    }
  }
  if (stats) {
    stats->evaluations += local.evaluations;
    stats->discarded += local.discarded;
  }
  if (!best) throw StallError("every candidate produced a non-finite loss");
  if (best_loss < loss_before)
    throw StallError(fmt::format("no candidate increases the loss (best {:.6g} < current {:.6g})", best_loss,
                                 loss_before));

  FlipRecord rec;
  rec.address = *best;
  std::tie(rec.code_before, rec.code_after) = apply_flip(model, *best);
  rec.loss_before = loss_before;
  rec.loss_after = best_loss;
  return rec;
}

AttackTrace run_attack(ModelGraph& model, const AttackBatch& batch, const AttackConfig& cfg,
                       const AccuracyFn& accuracy, std::string mode) {
  cfg.validate();
  if (!model.quantized()) throw StateError("run_attack: model is not quantized");
  const ModelGraph original = model;

  AttackTrace trace;
  trace.mode = std::move(mode);
  trace.config = cfg;
  trace.initial_loss = batch_loss(model, batch);
  if (accuracy) trace.initial_accuracy = accuracy(model);

  std::optional<double> last_acc = trace.initial_accuracy;
  std::size_t steps = 0;
  while (true) {
    trace.hamming_distance = hamming_distance(original, model);
    if (trace.hamming_distance >= cfg.max_flips) {
      trace.stop_reason = "budget";
      break;
    }
    if (steps >= cfg.step_cap()) {
      trace.stop_reason = "step cap";
      break;
    }
    if (cfg.accuracy_floor && last_acc && *last_acc <= *cfg.accuracy_floor) {
      trace.stop_reason = "accuracy floor";
      break;
    }
    SearchStepStats stats;
    FlipRecord rec;
    try {
      rec = progressive_search_step(model, batch, cfg, &stats);
    } catch (const StallError& e) {
      trace.evaluations += stats.evaluations;
      trace.discarded_candidates += stats.discarded;
      if (trace.flips.empty()) throw;
      trace.stop_reason = std::string("stalled: ") + e.what();
      break;
    }
    trace.evaluations += stats.evaluations;
    trace.discarded_candidates += stats.discarded;
    ++steps;
    if (accuracy) {
      rec.accuracy_after = accuracy(model);
      last_acc = rec.accuracy_after;
      trace.accuracy_series.push_back(*rec.accuracy_after);
    }
    trace.loss_series.push_back(rec.loss_after);
    trace.flips.push_back(rec);
  }
  return trace;
}

ModelGraph replay_flips(const ModelGraph& original, std::span<const FlipRecord> flips) {
  ModelGraph m = original;
  for (std::size_t i = 0; i < flips.size(); ++i) {
    auto [before, after] = apply_flip(m, flips[i].address);
    if (before != flips[i].code_before || after != flips[i].code_after)
      throw ConsistencyError(fmt::format("replay: flip {} expected code {} -> {}, found {} -> {}", i,
                                         flips[i].code_before, flips[i].code_after, before, after));
  }
  return m;
}

std::optional<std::size_t> flips_to_accuracy(const AttackTrace& trace, double threshold) {
  if (trace.initial_accuracy && *trace.initial_accuracy <= threshold) return 0;
  for (std::size_t i = 0; i < trace.accuracy_series.size(); ++i)
    if (trace.accuracy_series[i] <= threshold) return i + 1;
  return std::nullopt;
}

namespace {

json config_json(const AttackConfig& c) {
  json j = {{"max_flips", c.max_flips},
            {"candidates_per_layer", c.candidates_per_layer},
            {"max_steps", c.step_cap()},
            {"seed", c.seed}};
  j["accuracy_floor"] = c.accuracy_floor ? json(*c.accuracy_floor) : json(nullptr);
  return j;
}

json record_json(const FlipRecord& r) {
  json j = {{"layer", r.address.layer},
            {"weight_index", r.address.weight_index},
            {"bit", r.address.bit},
            {"code_before", r.code_before},
            {"code_after", r.code_after},
            {"loss_before", r.loss_before},
            {"loss_after", r.loss_after}};
  if (r.accuracy_after) j["accuracy_after"] = *r.accuracy_after;
  return j;
}

}  // namespace

void save_trace(const AttackTrace& t, const std::filesystem::path& dir) {
  json flips = json::array();
  for (const auto& r : t.flips) flips.push_back(record_json(r));
  json j = {{"format", "bdfa-trace"},
            {"format_version", 1},
            {"mode", t.mode},
            {"config", config_json(t.config)},
            {"initial_loss", t.initial_loss},
            {"flips", flips},
            {"loss_series", t.loss_series},
            {"accuracy_series", t.accuracy_series},
            {"evaluations", t.evaluations},
            {"discarded_candidates", t.discarded_candidates},
            {"hamming_distance", t.hamming_distance},
            {"stop_reason", t.stop_reason}};
  j["initial_accuracy"] = t.initial_accuracy ? json(*t.initial_accuracy) : json(nullptr);

  std::string csv = "flip_index,loss,accuracy\n";
  auto acc_str = [](std::optional<double> a) { return a ? fmt::format("{:.6f}", *a) : std::string(); };
  csv += fmt::format("0,{:.9g},{}\n", t.initial_loss, acc_str(t.initial_accuracy));
  for (std::size_t i = 0; i < t.flips.size(); ++i)
    csv += fmt::format("{},{:.9g},{}\n", i + 1, t.loss_series[i], acc_str(t.flips[i].accuracy_after));

  std::filesystem::create_directories(dir);
  write_text_file(dir / "trace.json", j.dump(2) + "\n");
  write_text_file(dir / "trace.csv", csv);
  write_flip_records_jsonl(dir / "flips.jsonl", t.flips);
}

AttackTrace load_trace(const std::filesystem::path& dir) {
  const auto path = dir / "trace.json";
  AttackTrace t;
  try {
    auto j = json::parse(read_text_file(path));
    if (j.value("format", "") != "bdfa-trace") throw FormatError(path.string() + ": not a trace file");
    t.mode = j.at("mode").get<std::string>();
    const auto& c = j.at("config");
    t.config.max_flips = c.at("max_flips").get<std::size_t>();
    t.config.candidates_per_layer = c.at("candidates_per_layer").get<std::size_t>();
    t.config.max_steps = c.at("max_steps").get<std::size_t>();
    t.config.seed = c.at("seed").get<std::uint64_t>();
    if (!c.at("accuracy_floor").is_null()) t.config.accuracy_floor = c.at("accuracy_floor").get<double>();
    t.initial_loss = j.at("initial_loss").get<double>();
    if (!j.at("initial_accuracy").is_null()) t.initial_accuracy = j.at("initial_accuracy").get<double>();
    for (const auto& r : j.at("flips")) {
      FlipRecord rec;
      rec.address = {r.at("layer").get<std::size_t>(), r.at("weight_index").get<std::size_t>(),
                     r.at("bit").get<int>()};
      rec.code_before = r.at("code_before").get<int>();
      rec.code_after = r.at("code_after").get<int>();
      rec.loss_before = r.at("loss_before").get<double>();
      rec.loss_after = r.at("loss_after").get<double>();
      if (r.contains("accuracy_after")) rec.accuracy_after = r.at("accuracy_after").get<double>();
      t.flips.push_back(rec);
    }
    t.loss_series = j.at("loss_series").get<std::vector<double>>();
    t.accuracy_series = j.at("accuracy_series").get<std::vector<double>>();
    t.evaluations = j.at("evaluations").get<std::size_t>();
    t.discarded_candidates = j.at("discarded_candidates").get<std::size_t>();
    t.hamming_distance = j.at("hamming_distance").get<std::size_t>();
    t.stop_reason = j.at("stop_reason").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return t;
}

}  // namespace bdfa
