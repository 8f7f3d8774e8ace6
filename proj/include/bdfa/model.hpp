#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bdfa/ops.hpp"
#include "bdfa/tensor.hpp"

namespace bdfa {

enum class LayerKind { conv2d, linear, batchnorm2d, relu, maxpool2d, avgpool2d, residual_add, flatten };

const char* layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

// Owned parameter storage (value semantics, unlike the Tensor handle).
struct ParamArray {
  Shape shape;
  std::vector<float> values;

  static ParamArray filled(Shape shape, float value) {
    ParamArray p{shape, {}};
    p.values.assign(shape_numel(shape), value);
    return p;
  }
  bool defined() const { return !shape.empty(); }
  std::size_t numel() const { return values.size(); }
  bool operator==(const ParamArray&) const = default;
};

// Per-tensor symmetric quantization of a conv/linear weight. The dequantized
// weight is delta * code; codes live in two's complement with `bits` bits.
struct QuantizedLayer {
  std::vector<std::int8_t> codes;
  float delta = 0.0f;
  int bits = 8;

  std::size_t size() const { return codes.size(); }
  std::vector<float> dequantize() const;
};

// Running batch statistics of one BN layer (population variance).
struct BNStats {
  std::vector<float> running_mean;
  std::vector<float> running_var;
  float momentum = 0.1f;
};

struct Layer {
  LayerKind kind = LayerKind::relu;
  // conv2d: in/out channels; linear: in/out features; batchnorm2d: channels.
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  // residual_add: index of the earlier layer whose output is added to the
  // current activation; -1 means the model input.
  int skip = -1;

  // conv2d/linear: weight and bias. batchnorm2d: weight = gamma, bias = beta.
  // Once quantized, `weight` keeps only its shape and `quant` is authoritative.
  ParamArray weight;
  ParamArray bias;
  std::optional<QuantizedLayer> quant;
  BNStats bn;

  bool has_params() const {
    return kind == LayerKind::conv2d || kind == LayerKind::linear || kind == LayerKind::batchnorm2d;
  }
  bool attackable() const { return kind == LayerKind::conv2d || kind == LayerKind::linear; }
  // Effective float weight: dequantized codes when quantized.
  std::vector<float> effective_weight() const;
};

struct ModelGraph {
  std::string arch;
  std::size_t num_classes = 0;
  std::array<std::size_t, 3> input_shape{};  // C, H, W
  std::vector<Layer> layers;

  std::vector<std::size_t> bn_layer_indices() const;
  std::vector<std::size_t> attackable_layer_indices() const;
  bool quantized() const;
  // Throws ConsistencyError if layer shapes do not compose, the head does not
  // produce num_classes outputs, or a BN layer lacks statistics.
  void validate() const;
  // Per-layer output shapes for a single sample (no batch axis).
  std::vector<Shape> layer_output_shapes() const;
};

inline constexpr double kBatchNormEps = 1e-5;

enum class ForwardMode { eval, train };

struct ForwardOptions {
  ForwardMode mode = ForwardMode::eval;
  // Make every parameter a gradient-tracking leaf (exposed in `params`).
  bool param_grads = false;
  // Only the conv/linear weights track gradients (bit-gradient path).
  bool weight_grads = false;
};

template <typename T>
struct LayerParams {
  Tensor<T> weight;  // gamma for BN
  Tensor<T> bias;    // beta for BN
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  ForwardMode mode = ForwardMode::eval;
  // Inputs to each BN layer in model order (train mode only); on the tape
  // when the forward tracked gradients.
  std::vector<Tensor<T>> bn_inputs;
  // Batch mean / population variance observed at each BN layer (train mode).
  std::vector<std::vector<double>> bn_batch_mean;
  std::vector<std::vector<double>> bn_batch_var;
  // Parameter leaves used by the forward, one entry per layer.
  std::vector<LayerParams<T>> params;
};

// Runs the network. Eval mode normalizes with running statistics; train mode
// uses batch statistics and records them in the result, but never mutates
// the model (see update_running_stats / forward_train).
template <typename T>
ForwardResult<T> forward(const ModelGraph& model, const Tensor<T>& x, const ForwardOptions& opts = {});

// Momentum update of BN running statistics from a train-mode forward.
template <typename T>
void update_running_stats(ModelGraph& model, const ForwardResult<T>& result);

template <typename T>
ForwardResult<T> forward_train(ModelGraph& model, const Tensor<T>& x, ForwardOptions opts = {}) {
  opts.mode = ForwardMode::train;
  auto result = forward(model, x, opts);
  update_running_stats(model, result);
  return result;
}

template <typename T>
struct ChannelStats {
  Tensor<T> mean;  // [C]
  Tensor<T> std;   // [C], square root of the population variance
};

// Batch statistics at the input of every BN layer of a completed train-mode
// forward. Differentiable when the forward was on the tape.
template <typename T>
std::vector<ChannelStats<T>> capture_bn_batch_stats(const ForwardResult<T>& result);

// Running statistics (mean, sqrt(var)) of every BN layer in model order.
std::vector<ChannelStats<float>> running_bn_stats(const ModelGraph& model);

// Builders for the in-repo victim architectures. Weights use Kaiming-uniform
// fan-in initialization; BN gamma = 1, beta = 0, running stats (0, 1).
ModelGraph make_architecture(const std::string& arch, std::array<std::size_t, 3> input_shape,
                             std::size_t num_classes, std::uint64_t seed);
std::vector<std::string> architecture_names();

void init_kaiming_uniform(ModelGraph& model, std::uint64_t seed);

}  // namespace bdfa
