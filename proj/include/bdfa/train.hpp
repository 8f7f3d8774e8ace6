#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bdfa/dataset.hpp"
#include "bdfa/model.hpp"

namespace bdfa {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::string lr_schedule = "cosine";  // cosine | constant
  double momentum = 0.9;
  double weight_decay = 5e-4;  // conv/linear weights only
  std::uint64_t seed = 0;

  void validate() const;
  double lr_at(std::size_t epoch) const;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> test_accuracy;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t count = 0;
};

// SGD with momentum on mean cross-entropy; BN layers run on batch statistics
// and update their running statistics. Throws DivergenceError naming the
// epoch when the loss or a parameter becomes non-finite.
std::vector<EpochMetrics> train(ModelGraph& model, const Dataset& data, const TrainConfig& config,
                                const Dataset* test = nullptr);

// Eval-mode accuracy and mean loss. Prediction is the argmax logit, ties to
// the lowest class index.
EvalResult evaluate(const ModelGraph& model, const Dataset& data, std::size_t batch_size = 256);

std::vector<int> predict(const Tensor<float>& logits);

}  // namespace bdfa
