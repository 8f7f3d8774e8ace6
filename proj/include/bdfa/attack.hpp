#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bdfa/model.hpp"
#include "bdfa/quant.hpp"

namespace bdfa {

struct AttackConfig {
  std::size_t max_flips = 30;            // Hamming budget C
  std::size_t candidates_per_layer = 1;  // k
  std::optional<double> accuracy_floor;  // stop once accuracy <= floor
  // Upper bound on search steps; re-flipping a bit lowers the Hamming
  // distance, so steps and distance can differ. 0 means 2 * max_flips.
  std::size_t max_steps = 0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t step_cap() const { return max_steps ? max_steps : 2 * max_flips; }
};

// Inputs and targets the search maximizes loss on: a distilled batch with its
// random labels (blind-data mode) or a real batch with true labels.
struct AttackBatch {
  Tensor<float> x;
  std::vector<int> labels;
};

struct AttackTrace {
  std::string mode;
  AttackConfig config;
  double initial_loss = 0.0;
  std::optional<double> initial_accuracy;
  std::vector<FlipRecord> flips;
  std::vector<double> loss_series;      // loss_after of each committed flip
  std::vector<double> accuracy_series;  // empty when no evaluation set
  std::size_t evaluations = 0;          // forward passes spent on candidates
  std::size_t discarded_candidates = 0; // non-finite candidate losses
  std::size_t hamming_distance = 0;
  std::string stop_reason;
};

using AccuracyFn = std::function<double(const ModelGraph&)>;

// Mean cross-entropy of the eval-mode model on the batch.
double batch_loss(const ModelGraph& model, const AttackBatch& batch);

// Up to k bits of one layer with the largest |dL/db| among those whose flip
// direction raises the first-order loss estimate. Ties: lower weight index,
// then lower bit position. Returns an empty set for an all-zero gradient.
std::vector<BitAddress> rank_bits_in_layer(const QuantizedLayer& layer, std::size_t layer_index,
                                           std::span<const double> bit_grads, std::size_t k);

struct SearchStepStats {
  std::size_t evaluations = 0;
  std::size_t discarded = 0;
};

// One round of progressive bit search: per-layer gradient ranking, then
// tentative flip / evaluate / undo of every candidate, then commit of the one
// candidate with the highest post-flip loss (first in layer order on ties).
// Throws StallError when no layer yields a candidate or when no candidate
// keeps the loss from decreasing.
FlipRecord progressive_search_step(ModelGraph& model, const AttackBatch& batch, const AttackConfig& cfg,
                                   SearchStepStats* stats = nullptr);

// Repeats search steps until the Hamming distance reaches max_flips, the
// step cap or accuracy floor is hit, or the search stalls. A stall before the
// first commit is rethrown.
AttackTrace run_attack(ModelGraph& model, const AttackBatch& batch, const AttackConfig& cfg,
                       const AccuracyFn& accuracy = {}, std::string mode = "bdfa");

// Applies a recorded flip sequence to a copy of `original`; verifies every
// recorded code_before.
ModelGraph replay_flips(const ModelGraph& original, std::span<const FlipRecord> flips);

// First flip count at which accuracy <= threshold (0 if already there).
std::optional<std::size_t> flips_to_accuracy(const AttackTrace& trace, double threshold);

// Directory: trace.json, trace.csv (flip_index,loss,accuracy; row 0 is the
// unattacked model), flips.jsonl.
void save_trace(const AttackTrace& trace, const std::filesystem::path& dir);
AttackTrace load_trace(const std::filesystem::path& dir);

}  // namespace bdfa
