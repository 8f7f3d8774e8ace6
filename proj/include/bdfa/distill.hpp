#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bdfa/model.hpp"

namespace bdfa {

struct DistillConfig {
  std::size_t batch_size = 128;
  std::size_t iterations = 500;
  double alpha = 1.0;  // weight of the BN-statistics loss
  double beta = 1.0;   // weight of the random-label classification loss
  double learning_rate = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  // Throws ConfigError: batch_size >= 1, iterations >= 1, alpha, beta >= 0
  // with alpha + beta > 0, learning_rate > 0.
  void validate() const;
};

struct DistillStep {
  std::size_t iteration = 0;
  double bn_loss = 0.0;
  double dnn_loss = 0.0;
  double total = 0.0;
};

struct DistilledBatch {
  Tensor<float> x;          // [N,C,H,W], every sample mean 0 / variance 1
  std::vector<int> labels;  // fixed at initialization, in [0, K)
  std::size_t num_classes = 0;
  DistillConfig config;
  double final_bn_loss = 0.0;
  double final_dnn_loss = 0.0;
  std::vector<DistillStep> history;  // losses before each update
};

// Shift and scale one sample to mean 0 and population variance 1.
template <typename T>
void project_unit_moments(std::span<T> sample);

// Standard-normal batch projected per sample, plus labels uniform over [0, K).
struct InitialBatch {
  Tensor<float> x;
  std::vector<int> labels;
};
InitialBatch init_batch(const Shape& shape, std::size_t num_classes, std::uint64_t seed);

// Sum over BN layers of ||mean_run - mean_batch||^2 + ||std_run - std_batch||^2.
template <typename T>
Tensor<T> bn_loss(const std::vector<ChannelStats<T>>& batch_stats,
                  const std::vector<ChannelStats<T>>& running_stats);

// Mean cross-entropy against fixed labels.
template <typename T>
Tensor<T> dnn_loss(const Tensor<T>& logits, std::span<const int> labels);

// Optimizes a synthetic batch so the model's BN batch statistics match its
// running statistics while the model classifies it as the random labels.
// The model is not modified.
DistilledBatch distill(const ModelGraph& model, const DistillConfig& config);

// Directory: manifest.json, x.bin (float32 LE), labels.bin (int32 LE),
// history.csv (iteration,bn_loss,dnn_loss,total).
void save_distilled(const DistilledBatch& batch, const std::filesystem::path& dir);
DistilledBatch load_distilled(const std::filesystem::path& dir);

}  // namespace bdfa
