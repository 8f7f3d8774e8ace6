#include "bdfa/model.hpp"

#include <cmath>

#include <fmt/format.h>

#include "bdfa/rng.hpp"

namespace bdfa {

namespace {

constexpr std::pair<LayerKind, const char*> kKindNames[] = {
    {LayerKind::conv2d, "conv2d"},       {LayerKind::linear, "linear"},
    {LayerKind::batchnorm2d, "batchnorm2d"}, {LayerKind::relu, "relu"},
    {LayerKind::maxpool2d, "maxpool2d"}, {LayerKind::avgpool2d, "avgpool2d"},
    {LayerKind::residual_add, "residual_add"}, {LayerKind::flatten, "flatten"},
};

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  for (auto [k, name] : kKindNames)
    if (k == kind) return name;
  return "unknown";
}

LayerKind layer_kind_from_name(const std::string& name) {
  for (auto [k, n] : kKindNames)
    if (name == n) return k;
  throw FormatError("unknown layer kind '" + name + "'");
}

std::vector<float> QuantizedLayer::dequantize() const {
  std::vector<float> w(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) w[i] = delta * static_cast<float>(codes[i]);
  return w;
}

std::vector<float> Layer::effective_weight() const {
  if (quant) return quant->dequantize();
  return weight.values;
}

std::vector<std::size_t> ModelGraph::bn_layer_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == LayerKind::batchnorm2d) out.push_back(i);
  return out;
}

std::vector<std::size_t> ModelGraph::attackable_layer_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].attackable()) out.push_back(i);
  return out;
}

bool ModelGraph::quantized() const {
  bool any = false;
  for (const auto& l : layers) {
    if (!l.attackable()) continue;
    if (!l.quant) return false;
    any = true;
  }
  return any;
}

std::vector<Shape> ModelGraph::layer_output_shapes() const {
  auto fail = [](std::size_t i, const std::string& msg) {
    throw ConsistencyError(fmt::format("layer {}: {}", i, msg));
  };
  std::vector<Shape> shapes;
  Shape cur{input_shape[0], input_shape[1], input_shape[2]};
  for (auto d : cur)
    if (d == 0) throw ConsistencyError("input shape has a zero extent");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    switch (l.kind) {
      case LayerKind::conv2d: {
        if (cur.size() != 3 || cur[0] != l.in_channels)
          fail(i, "conv2d input " + shape_str(cur) + " does not match in_channels " +
                      std::to_string(l.in_channels));
        if (l.kernel == 0 || l.stride == 0 || cur[1] + 2 * l.pad < l.kernel ||
            cur[2] + 2 * l.pad < l.kernel)
          fail(i, "conv2d geometry invalid");
        if (!l.weight.defined() ||
            l.weight.shape != Shape{l.out_channels, l.in_channels, l.kernel, l.kernel})
          fail(i, "conv2d weight shape mismatch");
        cur = {l.out_channels, (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1,
               (cur[2] + 2 * l.pad - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::linear:
        if (cur.size() != 1 || cur[0] != l.in_channels)
          fail(i, "linear input " + shape_str(cur) + " does not match in_features " +
                      std::to_string(l.in_channels));
        if (!l.weight.defined() || l.weight.shape != Shape{l.out_channels, l.in_channels})
          fail(i, "linear weight shape mismatch");
        cur = {l.out_channels};
        break;
      case LayerKind::batchnorm2d:
        if (cur.size() != 3 || cur[0] != l.in_channels) fail(i, "batchnorm2d channel mismatch");
        if (!l.weight.defined() || !l.bias.defined() || l.weight.numel() != l.in_channels ||
            l.bias.numel() != l.in_channels)
          fail(i, "batchnorm2d gamma/beta length mismatch");
        if (l.bn.running_mean.size() != l.in_channels || l.bn.running_var.size() != l.in_channels)
          fail(i, "batchnorm2d running statistics length mismatch");
        for (float v : l.bn.running_var)
          if (!(v >= 0.0f)) fail(i, "batchnorm2d running_var has a negative entry");
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxpool2d:
      case LayerKind::avgpool2d:
        if (cur.size() != 3 || l.kernel == 0 || l.stride == 0 || l.kernel > cur[1] ||
            l.kernel > cur[2])
          fail(i, "pooling geometry invalid for input " + shape_str(cur));
        cur = {cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
        break;
      case LayerKind::residual_add: {
        if (l.skip < -1 || l.skip >= static_cast<int>(i)) fail(i, "residual_add skip out of range");
        const Shape& other =
            l.skip < 0 ? Shape{input_shape[0], input_shape[1], input_shape[2]} : shapes[l.skip];
        if (other != cur) fail(i, "residual_add shapes " + shape_str(cur) + " vs " + shape_str(other));
        break;
      }
      case LayerKind::flatten:
        cur = {shape_numel(cur)};
        break;
    }
    if (l.quant) {
      if (!l.attackable()) fail(i, "quantized weights on a non-weight layer");
      if (l.quant->codes.size() != shape_numel(l.weight.shape)) fail(i, "quantized code count mismatch");
      if (l.quant->bits < 2 || l.quant->bits > 8 || !(l.quant->delta > 0.0f))
        fail(i, "quantization parameters invalid");
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void ModelGraph::validate() const {
  if (layers.empty()) throw ConsistencyError("model has no layers");
  auto shapes = layer_output_shapes();
  const Shape& head = shapes.back();
  if (head.size() != 1 || head[0] != num_classes)
    throw ConsistencyError(fmt::format("model head outputs {} but declares K={}", shape_str(head),
                                       num_classes));
}

namespace {

template <typename T>
Tensor<T> make_param(const ParamArray& src, bool track) {
  Tensor<T> t(src.shape, std::vector<T>(src.values.begin(), src.values.end()));
  t.set_requires_grad(track);
  return t;
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const ModelGraph& model, const Tensor<T>& x, const ForwardOptions& opts) {
  const auto& in = model.input_shape;
  if (x.rank() != 4 || x.dim(1) != in[0] || x.dim(2) != in[1] || x.dim(3) != in[2])
    throw ShapeError(fmt::format("forward: input {} does not match model input [N,{},{},{}]",
                                 shape_str(x.shape()), in[0], in[1], in[2]));
  ForwardResult<T> result;
  result.mode = opts.mode;
  result.params.resize(model.layers.size());
  std::vector<Tensor<T>> acts;
  acts.reserve(model.layers.size());
  Tensor<T> cur = x;

  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    auto& p = result.params[i];
    try {
      switch (l.kind) {
        case LayerKind::conv2d:
        case LayerKind::linear: {
          const bool track_w = opts.param_grads || opts.weight_grads;
          if (l.quant) {
            p.weight = Tensor<T>(l.weight.shape, std::vector<T>(l.quant->codes.size()));
            auto w = p.weight.mutable_data();
            for (std::size_t k = 0; k < w.size(); ++k)
              w[k] = static_cast<T>(l.quant->delta * static_cast<float>(l.quant->codes[k]));
            p.weight.set_requires_grad(track_w);
          } else {
            p.weight = make_param<T>(l.weight, track_w);
          }
          if (l.bias.defined()) p.bias = make_param<T>(l.bias, opts.param_grads);
          cur = l.kind == LayerKind::conv2d
                    ? ops::conv2d(cur, p.weight, p.bias, {l.stride, l.pad})
                    : ops::linear(cur, p.weight, p.bias);
          break;
        }
        case LayerKind::batchnorm2d:
          p.weight = make_param<T>(l.weight, opts.param_grads);
          p.bias = make_param<T>(l.bias, opts.param_grads);
          if (opts.mode == ForwardMode::train) {
            result.bn_inputs.push_back(cur);
            auto bn = ops::batchnorm2d_train(cur, p.weight, p.bias, kBatchNormEps);
            result.bn_batch_mean.push_back(std::move(bn.batch_mean));
            result.bn_batch_var.push_back(std::move(bn.batch_var));
            cur = bn.output;
          } else {
            cur = ops::batchnorm2d_eval(cur, p.weight, p.bias, l.bn.running_mean,
                                        l.bn.running_var, kBatchNormEps);
          }
          break;
        case LayerKind::relu:
          cur = ops::relu(cur);
          break;
        case LayerKind::maxpool2d:
          cur = ops::maxpool2d(cur, l.kernel, l.stride);
          break;
        case LayerKind::avgpool2d:
          cur = ops::avgpool2d(cur, l.kernel, l.stride);
          break;
        case LayerKind::residual_add:
          if (l.skip < -1 || l.skip >= static_cast<int>(i))
            throw ConsistencyError(fmt::format("layer {}: residual_add skip out of range", i));
          cur = ops::add(cur, l.skip < 0 ? x : acts[l.skip]);
          break;
        case LayerKind::flatten:
          cur = ops::flatten(cur);
          break;
      }
    } catch (const LayerNonFiniteError&) {
      throw;
    } catch (const NonFiniteError& e) {
      throw LayerNonFiniteError(i, fmt::format("layer {} ({}): {}", i, layer_kind_name(l.kind), e.what()));
    }
    acts.push_back(cur);
  }
  if (cur.rank() != 2 || cur.dim(1) != model.num_classes)
    throw ConsistencyError(fmt::format("forward: head produced {} but K={}", shape_str(cur.shape()),
                                       model.num_classes));
  result.logits = cur;
  return result;
}

template <typename T>
void update_running_stats(ModelGraph& model, const ForwardResult<T>& result) {
  if (result.mode != ForwardMode::train)
    throw StateError("update_running_stats: requires a train-mode forward");
  auto bn_layers = model.bn_layer_indices();
  if (bn_layers.size() != result.bn_batch_mean.size())
    throw StateError("update_running_stats: forward result does not belong to this model");
  for (std::size_t j = 0; j < bn_layers.size(); ++j) {
    auto& bn = model.layers[bn_layers[j]].bn;
    const double m = bn.momentum;
    for (std::size_t c = 0; c < bn.running_mean.size(); ++c) {
      bn.running_mean[c] =
          static_cast<float>((1.0 - m) * bn.running_mean[c] + m * result.bn_batch_mean[j][c]);
      bn.running_var[c] =
          static_cast<float>((1.0 - m) * bn.running_var[c] + m * result.bn_batch_var[j][c]);
    }
  }
}

template <typename T>
std::vector<ChannelStats<T>> capture_bn_batch_stats(const ForwardResult<T>& result) {
  if (!result.logits.defined())
    throw StateError("capture_bn_batch_stats: no forward has been executed");
  if (result.mode != ForwardMode::train)
    throw StateError("capture_bn_batch_stats: requires a train-mode (batch statistics) forward");
  std::vector<ChannelStats<T>> stats;
  stats.reserve(result.bn_inputs.size());
  for (const auto& in : result.bn_inputs)
    stats.push_back({ops::channel_mean(in), ops::channel_std(in)});
  return stats;
}

std::vector<ChannelStats<float>> running_bn_stats(const ModelGraph& model) {
  std::vector<ChannelStats<float>> out;
  for (auto i : model.bn_layer_indices()) {
    const auto& bn = model.layers[i].bn;
    std::vector<float> sd(bn.running_var.size());
    for (std::size_t c = 0; c < sd.size(); ++c) sd[c] = std::sqrt(bn.running_var[c]);
    out.push_back({Tensor<float>({bn.running_mean.size()}, bn.running_mean),
                   Tensor<float>({bn.running_var.size()}, std::move(sd))});
  }
  return out;
}

namespace {

Layer conv(std::size_t in, std::size_t out, std::size_t k, std::size_t pad) {
  Layer l;
  l.kind = LayerKind::conv2d;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = k;
  l.pad = pad;
  l.weight = ParamArray::filled({out, in, k, k}, 0.0f);
  l.bias = ParamArray::filled({out}, 0.0f);
  return l;
}

Layer linear(std::size_t in, std::size_t out) {
  Layer l;
  l.kind = LayerKind::linear;
  l.in_channels = in;
  l.out_channels = out;
  l.weight = ParamArray::filled({out, in}, 0.0f);
  l.bias = ParamArray::filled({out}, 0.0f);
  return l;
}

Layer batchnorm(std::size_t c) {
  Layer l;
  l.kind = LayerKind::batchnorm2d;
  l.in_channels = c;
  l.out_channels = c;
  l.weight = ParamArray::filled({c}, 1.0f);
  l.bias = ParamArray::filled({c}, 0.0f);
  l.bn.running_mean.assign(c, 0.0f);
  l.bn.running_var.assign(c, 1.0f);
  return l;
}

Layer simple(LayerKind kind, std::size_t kernel = 0) {
  Layer l;
  l.kind = kind;
  l.kernel = kernel;
  l.stride = kernel ? kernel : 1;
  return l;
}

Layer residual(int skip) {
  Layer l;
  l.kind = LayerKind::residual_add;
  l.skip = skip;
  return l;
}

}  // namespace

std::vector<std::string> architecture_names() {
  return {"tiny_cnn_v1", "tiny_resnet_v1", "micro_cnn_v1"};
}

ModelGraph make_architecture(const std::string& arch, std::array<std::size_t, 3> input_shape,
                             std::size_t num_classes, std::uint64_t seed) {
  ModelGraph m;
  m.arch = arch;
  m.num_classes = num_classes;
  m.input_shape = input_shape;
  const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
  if (num_classes < 2) throw ConfigError("architecture: need at least two classes");
  auto& L = m.layers;
  if (arch == "tiny_cnn_v1") {
    // conv-BN-ReLU-pool, conv-BN-ReLU, 4x4 average pool, linear head.
    if (h % 8 || w % 8) throw ConfigError("tiny_cnn_v1: input H and W must be multiples of 8");
    L = {conv(c, 8, 3, 1), batchnorm(8), simple(LayerKind::relu), simple(LayerKind::maxpool2d, 2),
         conv(8, 16, 3, 1), batchnorm(16), simple(LayerKind::relu),
         simple(LayerKind::avgpool2d, 4), simple(LayerKind::flatten),
         linear(16 * (h / 8) * (w / 8), num_classes)};
  } else if (arch == "tiny_resnet_v1") {
    // Stem followed by one basic residual block.
    if (h % 8 || w % 8) throw ConfigError("tiny_resnet_v1: input H and W must be multiples of 8");
    L = {conv(c, 8, 3, 1), batchnorm(8), simple(LayerKind::relu), simple(LayerKind::maxpool2d, 2),
         conv(8, 8, 3, 1), batchnorm(8), simple(LayerKind::relu),
         conv(8, 8, 3, 1), batchnorm(8), residual(3), simple(LayerKind::relu),
         simple(LayerKind::avgpool2d, 4), simple(LayerKind::flatten),
         linear(8 * (h / 8) * (w / 8), num_classes)};
  } else if (arch == "micro_cnn_v1") {
    // Small enough for exhaustive single-flip enumeration.
    if (h % 2 || w % 2) throw ConfigError("micro_cnn_v1: input H and W must be even");
    L = {conv(c, 4, 3, 1), batchnorm(4), simple(LayerKind::relu), simple(LayerKind::maxpool2d, 2),
         simple(LayerKind::flatten), linear(4 * (h / 2) * (w / 2), num_classes)};
  } else {
    throw ConfigError("unknown architecture '" + arch + "'");
  }
  init_kaiming_uniform(m, seed);
  m.validate();
  return m;
}

void init_kaiming_uniform(ModelGraph& model, std::uint64_t seed) {
  auto rng = make_rng(seed, RngStream::init);
  for (auto& l : model.layers) {
    if (!l.attackable()) continue;
    const std::size_t fan_in = l.weight.numel() / l.out_channels;
    const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (auto& v : l.weight.values) v = dist(rng);
    for (auto& v : l.bias.values) v = 0.0f;
    l.quant.reset();
  }
}

#define BDFA_INSTANTIATE_MODEL(T)                                                             \
  template ForwardResult<T> forward(const ModelGraph&, const Tensor<T>&, const ForwardOptions&); \
  template void update_running_stats(ModelGraph&, const ForwardResult<T>&);                   \
  template std::vector<ChannelStats<T>> capture_bn_batch_stats(const ForwardResult<T>&);

BDFA_INSTANTIATE_MODEL(float)
BDFA_INSTANTIATE_MODEL(double)

#undef BDFA_INSTANTIATE_MODEL

}  // namespace bdfa
