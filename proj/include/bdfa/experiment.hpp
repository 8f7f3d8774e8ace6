#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bdfa/attack.hpp"
#include "bdfa/config.hpp"
#include "bdfa/dataset.hpp"
#include "bdfa/distill.hpp"
#include "bdfa/report.hpp"
#include "bdfa/train.hpp"

namespace bdfa {

// "blobs4" / "rings2" (generated from the seed) or "cifar" (read from path).
struct DatasetSpec {
  std::string name = "blobs4";
  std::size_t train_size = 2000;
  std::size_t test_size = 400;
  std::string path;

  void validate() const;
};

DatasetSplits load_dataset(const DatasetSpec& spec, std::uint64_t seed);

struct ExperimentConfig {
  std::size_t seeds = 5;
  std::uint64_t base_seed = 0;
  std::size_t jobs = 1;  // seeds run concurrently on this many threads
  DatasetSpec dataset;
  std::string arch = "tiny_resnet_v1";
  TrainConfig train;
  int quant_bits = 8;
  DistillConfig distill;
  AttackConfig attack;
  std::vector<std::string> modes{"bdfa", "bfa"};
  std::size_t bfa_batch_size = 128;  // real training samples driving BFA
  double threshold = 0.375;          // accuracy reported as flips-to-threshold

  void validate() const;
  static ExperimentConfig from_config(const KeyValueConfig& kv);
  // Resolved configuration in the same text format.
  std::string to_text() const;
};

// Trained float victim, its quantized copy and the data it was trained on.
struct Victim {
  DatasetSplits data;
  ModelGraph float_model;
  ModelGraph quantized;
  std::vector<EpochMetrics> train_metrics;
  double float_accuracy = 0.0;
  double quantized_accuracy = 0.0;
};

Victim build_victim(const ExperimentConfig& cfg, std::uint64_t seed);

// n training samples with their true labels (the real-data baseline batch).
AttackBatch real_data_batch(const Dataset& train, std::size_t n, std::uint64_t seed);

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = true;
  std::string failed_stage;
  std::string error;
  double float_accuracy = 0.0;
  double quantized_accuracy = 0.0;
  std::optional<double> distill_initial_bn_loss;
  std::optional<double> distill_final_bn_loss;
  std::map<std::string, AttackTrace> traces;  // by mode
};

// Full pipeline for one seed. Artifacts go under `dir` unless it is empty.
// Stage failures are caught and recorded in the outcome.
SeedOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);

// Accuracy per flip count 0..max_flips over the given traces; a trace that
// stopped early contributes its last accuracy to later flip counts.
std::vector<AggregateRow> aggregate_traces(const std::string& network, const std::string& dataset,
                                           const std::string& mode, const std::vector<const AttackTrace*>& traces,
                                           std::size_t max_flips);

struct ExperimentSummary {
  std::vector<SeedOutcome> seeds;
  std::vector<AggregateRow> aggregate;
};

// Writes config.toml, seed_<s>/..., aggregate.csv, report.json, report.svg,
// report.md under `out`.
ExperimentSummary run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out);

}  // namespace bdfa
