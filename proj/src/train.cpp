#include "bdfa/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

#include "bdfa/rng.hpp"

namespace bdfa {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("train: learning_rate must be >= 0");
  if (lr_schedule != "cosine" && lr_schedule != "constant")
    throw ConfigError("train: lr_schedule must be 'cosine' or 'constant', got '" + lr_schedule + "'");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  if (lr_schedule == "constant") return learning_rate;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs);
  return 0.5 * learning_rate * (1.0 + std::cos(std::numbers::pi * t));
}

std::vector<int> predict(const Tensor<float>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  auto d = logits.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (d[i * k + c] > d[i * k + best]) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

EvalResult evaluate(const ModelGraph& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw DatasetError("evaluate: empty split");
  if (data.num_classes != model.num_classes)
    throw ConsistencyError(fmt::format("evaluate: dataset has {} classes, model {}", data.num_classes,
                                       model.num_classes));
  batch_size = std::max<std::size_t>(batch_size, 1);
  EvalResult r;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto labels = data.gather_labels(idx);
    auto fwd = forward(model, data.gather(idx));
    loss_sum += ops::softmax_cross_entropy(fwd.logits, labels).item() * static_cast<double>(idx.size());
    auto pred = predict(fwd.logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  }
  r.count = data.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
  r.mean_loss = loss_sum / static_cast<double>(r.count);
  return r;
}

std::vector<EpochMetrics> train(ModelGraph& model, const Dataset& data, const TrainConfig& cfg,
                                const Dataset* test) {
  cfg.validate();
  if (model.quantized()) throw StateError("train: model is quantized");
  if (data.size() == 0) throw DatasetError("train: empty split");
  if (data.num_classes != model.num_classes)
    throw ConsistencyError(fmt::format("train: dataset has {} classes, model {}", data.num_classes,
                                       model.num_classes));

  // Momentum buffers, parallel to layer weight/bias values.
  std::vector<std::vector<float>> vel_w(model.layers.size()), vel_b(model.layers.size());
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    vel_w[li].assign(model.layers[li].weight.values.size(), 0.0f);
    vel_b[li].assign(model.layers[li].bias.values.size(), 0.0f);
  }

  auto rng = make_rng(cfg.seed, RngStream::shuffle);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochMetrics> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t n = std::min(cfg.batch_size, order.size() - start);
        std::span<const std::size_t> idx(order.data() + start, n);
        auto labels = data.gather_labels(idx);
        auto fwd = forward_train(model, data.gather(idx), {.param_grads = true});
        auto loss = ops::softmax_cross_entropy(fwd.logits, labels);
        backward(loss);
        loss_sum += loss.item() * static_cast<double>(n);
        auto pred = predict(fwd.logits);
        for (std::size_t i = 0; i < n; ++i) correct += pred[i] == labels[i];

        for (std::size_t li = 0; li < model.layers.size(); ++li) {
          auto& layer = model.layers[li];
          if (!layer.has_params()) continue;
          const double wd = layer.attackable() ? cfg.weight_decay : 0.0;
          auto step = [&](std::vector<float>& w, std::vector<float>& v, const Tensor<float>& t, double decay) {
            if (!t.defined() || !t.has_grad()) return;
            auto g = t.grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
              v[i] = static_cast<float>(cfg.momentum * v[i] + g[i] + decay * w[i]);
              w[i] = static_cast<float>(w[i] - lr * v[i]);
              if (!std::isfinite(w[i]))
                throw NonFiniteError(fmt::format("layer {} parameter became non-finite", li));
            }
          };
          step(layer.weight.values, vel_w[li], fwd.params[li].weight, wd);
          step(layer.bias.values, vel_b[li], fwd.params[li].bias, 0.0);
        }
      }
    } catch (const NonFiniteError& e) {
      throw DivergenceError(fmt::format("training diverged in epoch {}: {}", epoch + 1, e.what()));
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.learning_rate = lr;
    m.train_loss = loss_sum / static_cast<double>(data.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    if (test) m.test_accuracy = evaluate(model, *test).accuracy;
    history.push_back(m);
  }
  return history;
}

}  // namespace bdfa
