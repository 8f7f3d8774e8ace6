// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Thresholds and time limits are pinned below.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "bdfa/attack.hpp"
#include "bdfa/cli.hpp"
#include "bdfa/distill.hpp"
#include "bdfa/experiment.hpp"
#include "bdfa/io.hpp"
#include "bdfa/quant.hpp"
#include "support/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace bdfa;

namespace {

// Criterion 1.
constexpr double kGradTol = 1e-5;
constexpr double kGradSeconds = 30;
// Criterion 2.
constexpr std::size_t kFlipSequences = 1000;
constexpr double kBitSeconds = 5;
// Criterion 3.
constexpr std::size_t kOracleVictims = 10;
constexpr std::size_t kOracleMaxBits = 5000;
constexpr double kOracleSeconds = 120;
// Criterion 4.
constexpr std::size_t kSeeds = 5;
constexpr std::size_t kDistillIterations = 500;
constexpr double kBnRatio = 0.1;
constexpr double kDistillSeconds = 180;
// Criterion 5.
constexpr double kCleanAccuracy = 0.90;
constexpr double kThreshold = 0.375;
constexpr std::size_t kFlipWindow = 20;
constexpr std::size_t kSeedsRequired = 4;
constexpr double kSeedSeconds = 300;
// Criterion 6.
constexpr double kParityFactor = 2.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool all_passed = true;

void report(int n, const std::string& title, bool pass, const std::string& detail) {
  all_passed = all_passed && pass;
  fmt::print("criterion {} ({}): {}  {}\n", n, title, pass ? "PASS" : "FAIL", detail);
  std::fflush(stdout);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Serialized bytes of a model: the strictest notion of "unchanged".
std::map<std::string, std::string> model_bytes(const ModelGraph& m, const fs::path& dir) {
  fs::remove_all(dir);
  save_model(m, dir);
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = read_bytes(e.path());
  fs::remove_all(dir);
  return out;
}

void gradient_correctness() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240611);
  double worst = 0;
  std::string worst_op;
  std::size_t configs = 0;
  for (const auto& op : gradcheck::op_cases())
    for (int s = 0; s < gradcheck::kConfigsPerOp; ++s) {
      auto [f, in] = op.make(rng);
      const double e = gradcheck::max_fd_error(f, in, rng);
      ++configs;
      if (e > worst) worst = e, worst_op = op.name;
    }
  const double secs = seconds_since(t0);
  report(1, "gradient correctness", worst < kGradTol && secs < kGradSeconds,
         fmt::format("max rel err {:.3g} ({}) over {} configs, tol {:g}; {:.1f} s (limit {:g} s)", worst, worst_op,
                     configs, kGradTol, secs, kGradSeconds));
}

void bit_mechanics() {
  const auto t0 = Clock::now();
  std::size_t bad_pairs = 0;
  for (int code = -128; code < 128; ++code)
    for (int b = 0; b < 8; ++b) {
      const int f = flip_bit(code, b);
      const unsigned x = static_cast<std::uint8_t>(code) ^ static_cast<std::uint8_t>(f);
      if (flip_bit(f, b) != code || x != (1u << b) || std::popcount(x) != 1) ++bad_pairs;
    }

  const ModelGraph original = quantize_model(make_architecture("micro_cnn_v1", {3, 8, 8}, 4, 1), 8);
  const auto layers = original.attackable_layer_indices();
  std::mt19937_64 rng(2);
  std::size_t bad_sequences = 0;
  for (std::size_t s = 0; s < kFlipSequences; ++s) {
    ModelGraph m = original;
    std::vector<FlipRecord> records;
    const std::size_t len = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t li = layers[std::uniform_int_distribution<std::size_t>(0, layers.size() - 1)(rng)];
      // A small weight range makes repeated hits on the same bit common.
      const std::size_t w = std::uniform_int_distribution<std::size_t>(0, 3)(rng);
      const int b = std::uniform_int_distribution<int>(0, 7)(rng);
      FlipRecord r;
      r.address = {li, w, b};
      std::tie(r.code_before, r.code_after) = apply_flip(m, r.address);
      records.push_back(r);
    }
    // Bookkeeping: an address counts iff it was flipped an odd number of times.
    std::set<BitAddress> odd;
    for (const auto& r : records)
      if (!odd.erase(r.address)) odd.insert(r.address);
    const ModelGraph replayed = replay_flips(original, records);
    bool same = true;
    for (auto li : layers) same = same && replayed.layers[li].quant->codes == m.layers[li].quant->codes;
    if (hamming_distance(original, m) != odd.size() || !same) ++bad_sequences;
  }
  const double secs = seconds_since(t0);
  report(2, "bit mechanics", bad_pairs == 0 && bad_sequences == 0 && secs < kBitSeconds,
         fmt::format("{} of 2048 (code, bit) pairs wrong, {} of {} flip sequences mismatched; {:.2f} s (limit {:g} s)",
                     bad_pairs, bad_sequences, kFlipSequences, secs, kBitSeconds));
}

std::size_t attackable_bits(const ModelGraph& m) {
  std::size_t n = 0;
  for (auto li : m.attackable_layer_indices()) n += m.layers[li].quant->size() * m.layers[li].quant->bits;
  return n;
}

// Exhaustive best single flip; ties resolve to the first (layer, weight, bit).
std::pair<BitAddress, double> brute_force_best(ModelGraph m, const AttackBatch& batch) {
  BitAddress best;
  double best_loss = -INFINITY;
  for (auto li : m.attackable_layer_indices()) {
    const auto& q = *m.layers[li].quant;
    for (std::size_t w = 0; w < q.size(); ++w)
      for (int b = 0; b < q.bits; ++b) {
        apply_flip(m, {li, w, b});
        const double l = batch_loss(m, batch);
        apply_flip(m, {li, w, b});
        if (l > best_loss) best_loss = l, best = {li, w, b};
      }
  }
  return {best, best_loss};
}

// Random micro_cnn_v1 victim with non-trivial BN statistics, and a random batch.
std::pair<ModelGraph, AttackBatch> oracle_victim(std::uint64_t seed) {
  ModelGraph m = make_architecture("micro_cnn_v1", {3, 8, 8}, 4, 100 + seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_real_distribution<float> var(0.5f, 2.0f);
  for (auto& l : m.layers)
    if (l.kind == LayerKind::batchnorm2d) {
      for (auto& v : l.bn.running_mean) v = 0.5f * normal(rng);
      for (auto& v : l.bn.running_var) v = var(rng);
    }
  m = quantize_model(m, 8);
  const std::size_t n = 32;
  std::vector<float> x(n * 3 * 8 * 8);
  for (auto& v : x) v = normal(rng);
  std::vector<int> labels(n);
  for (auto& y : labels) y = std::uniform_int_distribution<int>(0, 3)(rng);
  return {m, {Tensor<float>({n, 3, 8, 8}, x), labels}};
}

void oracle_equivalence() {
  const auto t0 = Clock::now();
  std::size_t match_all = 0, match_k1 = 0, max_bits = 0;
  for (std::uint64_t s = 0; s < kOracleVictims; ++s) {
    auto [m, batch] = oracle_victim(s);
    max_bits = std::max(max_bits, attackable_bits(m));
    const auto [best, best_loss] = brute_force_best(m, batch);
    // Equal true loss counts as a match: candidates are visited in gradient
    // order, so a tie may resolve to a different address.
    auto matches = [&](const FlipRecord& r) { return r.address == best || r.loss_after == best_loss; };

    AttackConfig all;
    all.candidates_per_layer = attackable_bits(m);
    ModelGraph a = m;
    match_all += matches(progressive_search_step(a, batch, all));
    ModelGraph b = m;
    match_k1 += matches(progressive_search_step(b, batch, AttackConfig{}));
  }
  const double secs = seconds_since(t0);
  report(3, "oracle equivalence",
         match_all == kOracleVictims && max_bits <= kOracleMaxBits && secs < kOracleSeconds,
         fmt::format("first flip equals brute-force argmax in {}/{} victims with k = all bits (k = 1: {}/{}); "
                     "{} attackable bits; {:.1f} s (limit {:g} s)",
                     match_all, kOracleVictims, match_k1, kOracleVictims, max_bits, secs, kOracleSeconds));
}

struct SeedRun {
  double clean = 0;
  double initial_bn = 0, final_bn = 0;
  bool model_unchanged = false;
  double distill_seconds = 0;
  double bdfa_seconds = 0;  // victim + distillation + BDFA attack
  std::map<std::string, AttackTrace> traces;
  std::map<std::string, bool> replay_exact;
};

SeedRun run_seed_for_acceptance(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& scratch) {
  SeedRun r;
  const auto t0 = Clock::now();
  Victim v = build_victim(cfg, seed);
  r.clean = v.quantized_accuracy;
  const auto accuracy = [&](const ModelGraph& m) { return evaluate(m, v.data.test).accuracy; };

  const auto before = model_bytes(v.quantized, scratch / "before");
  const auto td = Clock::now();
  DistillConfig dc = cfg.distill;
  dc.seed = seed;
  DistilledBatch d = distill(v.quantized, dc);
  r.distill_seconds = seconds_since(td);
  r.initial_bn = d.history.front().bn_loss;
  r.final_bn = d.final_bn_loss;
  r.model_unchanged = model_bytes(v.quantized, scratch / "after") == before;

  // Replay starts from a model read back from disk.
  save_model(v.quantized, scratch / "fresh");
  for (const std::string mode : {"bdfa", "bfa"}) {
    AttackBatch batch = mode == "bdfa" ? AttackBatch{d.x, d.labels}
                                       : real_data_batch(v.data.train, cfg.bfa_batch_size, seed);
    AttackConfig ac = cfg.attack;
    ac.seed = seed;
    ModelGraph victim = v.quantized;
    AttackTrace t = run_attack(victim, batch, ac, accuracy, mode);
    if (mode == "bdfa") r.bdfa_seconds = seconds_since(t0);
    const ModelGraph replayed = replay_flips(load_model(scratch / "fresh"), t.flips);
    bool exact = true;
    for (auto li : victim.attackable_layer_indices())
      exact = exact && replayed.layers[li].quant->codes == victim.layers[li].quant->codes;
    r.replay_exact[mode] = exact;
    r.traces.emplace(mode, std::move(t));
  }
  fs::remove_all(scratch / "fresh");
  fmt::print("  seed {}: clean {:.4f}, bn_loss {:.4g} -> {:.4g}, bdfa {:.3f} / bfa {:.3f} at flip {}\n", seed,
             r.clean, r.initial_bn, r.final_bn,
             r.traces["bdfa"].accuracy_series.size() >= kFlipWindow
                 ? r.traces["bdfa"].accuracy_series[kFlipWindow - 1]
                 : r.traces["bdfa"].accuracy_series.back(),
             r.traces["bfa"].accuracy_series.size() >= kFlipWindow ? r.traces["bfa"].accuracy_series[kFlipWindow - 1]
                                                                   : r.traces["bfa"].accuracy_series.back(),
             kFlipWindow);
  std::fflush(stdout);
  return r;
}

void end_to_end(const fs::path& scratch) {
  ExperimentConfig cfg;  // defaults: residual victim on blobs4
  cfg.distill.iterations = kDistillIterations;
  fmt::print("  victim {} on {} (train {}, test {}), C = {}, k = {}\n", cfg.arch, cfg.dataset.name,
             cfg.dataset.train_size, cfg.dataset.test_size, cfg.attack.max_flips, cfg.attack.candidates_per_layer);
  std::vector<SeedRun> runs;
  for (std::uint64_t s = 0; s < kSeeds; ++s) runs.push_back(run_seed_for_acceptance(cfg, s, scratch));

  // 4: distillation quality.
  double ratio_sum = 0, distill_total = 0;
  bool unchanged = true;
  for (const auto& r : runs) {
    ratio_sum += r.final_bn / r.initial_bn;
    distill_total += r.distill_seconds;
    unchanged = unchanged && r.model_unchanged;
  }
  const double ratio = ratio_sum / kSeeds;
  report(4, "distillation quality", ratio <= kBnRatio && unchanged && distill_total < kDistillSeconds,
         fmt::format("mean final/initial bn_loss {:.4f} (limit {:g}) over {} seeds x {} iterations; model {}; "
                     "{:.1f} s (limit {:g} s)",
                     ratio, kBnRatio, kSeeds, kDistillIterations, unchanged ? "bit-unchanged" : "CHANGED",
                     distill_total, kDistillSeconds));

  // 5: attack efficacy.
  std::size_t succeeded = 0;
  bool clean_ok = true, time_ok = true;
  double slowest = 0;
  std::string per_seed;
  for (const auto& r : runs) {
    const auto reach = flips_to_accuracy(r.traces.at("bdfa"), kThreshold);
    succeeded += reach && *reach <= kFlipWindow;
    clean_ok = clean_ok && r.clean >= kCleanAccuracy;
    time_ok = time_ok && r.bdfa_seconds < kSeedSeconds;
    slowest = std::max(slowest, r.bdfa_seconds);
    per_seed += reach ? fmt::format(" {}", *reach) : std::string(" -");
  }
  report(5, "attack efficacy", succeeded >= kSeedsRequired && clean_ok && time_ok,
         fmt::format("BDFA reached <= {:g} within {} flips in {}/{} seeds (need {}); flips per seed:{}; clean "
                     "accuracy {} {:g}; slowest seed {:.1f} s (limit {:g} s)",
                     kThreshold, kFlipWindow, succeeded, kSeeds, kSeedsRequired, per_seed,
                     clean_ok ? ">=" : "NOT >=", kCleanAccuracy, slowest, kSeedSeconds));

  // 6: parity. A seed that never reaches the threshold counts as C + 1.
  const double unmet = static_cast<double>(cfg.attack.max_flips + 1);
  double bdfa_sum = 0, bfa_sum = 0;
  for (const auto& r : runs) {
    const auto a = flips_to_accuracy(r.traces.at("bdfa"), kThreshold);
    const auto b = flips_to_accuracy(r.traces.at("bfa"), kThreshold);
    bdfa_sum += a ? static_cast<double>(*a) : unmet;
    bfa_sum += b ? static_cast<double>(*b) : unmet;
  }
  const double bdfa_mean = bdfa_sum / kSeeds, bfa_mean = bfa_sum / kSeeds;
  report(6, "BDFA vs BFA parity", bdfa_mean <= kParityFactor * bfa_mean,
         fmt::format("mean flips to <= {:g}: BDFA {:.1f}, BFA {:.1f} (limit {:g}x; unmet counts as {:g})", kThreshold,
                     bdfa_mean, bfa_mean, kParityFactor, unmet));

  // 7: budget and replay.
  std::size_t traces = 0, over_budget = 0, not_exact = 0, max_hd = 0;
  for (const auto& r : runs)
    for (const auto& [mode, t] : r.traces) {
      ++traces;
      over_budget += t.hamming_distance > t.config.max_flips;
      not_exact += !r.replay_exact.at(mode);
      max_hd = std::max(max_hd, t.hamming_distance);
    }
  report(7, "budget and replay", over_budget == 0 && not_exact == 0,
         fmt::format("{} traces: max Hamming distance {} (C = {}), {} over budget, {} replay mismatches", traces,
                     max_hd, cfg.attack.max_flips, over_budget, not_exact));
}

void reporting(const fs::path& data_dir, const fs::path& scratch) {
  const fs::path ref = data_dir / "reference";
  const fs::path out = scratch / "report";
  fs::remove_all(out);
  const int code = cli_dispatch(std::vector<std::string>{"report", ref.string(), "--out", out.string()});
  const bool svg_same = code == 0 && read_bytes(out / "report.svg") == read_bytes(ref / "report.svg");
  const bool md_same = code == 0 && read_bytes(out / "report.md") == read_bytes(ref / "report.md");
  const std::string md = code == 0 ? read_bytes(out / "report.md") : std::string();
  const bool caption = md.find("75.96") != std::string::npos && md.find("3.6 ± 1.6") != std::string::npos;
  report(8, "reporting", svg_same && md_same && caption,
         fmt::format("report exit {}; SVG {}; markdown {}; caption {}", code,
                     svg_same ? "byte-identical" : "DIFFERS", md_same ? "byte-identical" : "DIFFERS",
                     caption ? "cites 75.96 and 3.6 ± 1.6" : "MISSING reference values"));
}

}  // namespace

int main() {
  const fs::path scratch = fs::temp_directory_path() / "bdfa_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);
  const std::vector<std::function<void()>> criteria = {
      gradient_correctness, bit_mechanics, oracle_equivalence, [&] { end_to_end(scratch); },
      [&] { reporting(BDFA_TEST_DATA_DIR, scratch); }};
  for (const auto& c : criteria) {
    try {
      c();
    } catch (const std::exception& e) {
      all_passed = false;
      fmt::print("criterion run aborted: FAIL  {}\n", e.what());
    }
  }
  fs::remove_all(scratch);
  fmt::print("acceptance: {}\n", all_passed ? "all criteria PASS" : "at least one criterion FAILED");
  return all_passed ? 0 : 1;
}
