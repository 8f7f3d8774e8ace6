#include "bdfa/distill.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include <fmt/format.h>

#include "bdfa/io.hpp"
#include "bdfa/rng.hpp"
#include "json.hpp"

namespace bdfa {

using nlohmann::json;

void DistillConfig::validate() const {
  if (batch_size < 1) throw ConfigError("distill: batch_size must be >= 1");
  if (iterations < 1) throw ConfigError("distill: iterations must be >= 1");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("distill: alpha and beta must be >= 0");
  if (!(alpha + beta > 0.0)) throw ConfigError("distill: alpha + beta must be > 0");
  if (!(learning_rate > 0.0)) throw ConfigError("distill: learning_rate must be > 0");
}

template <typename T>
void project_unit_moments(std::span<T> sample) {
  if (sample.empty()) return;
  double mean = 0.0;
  for (T v : sample) mean += v;
  mean /= static_cast<double>(sample.size());
  double var = 0.0;
  for (T v : sample) var += (v - mean) * (v - mean);
  var /= static_cast<double>(sample.size());
  if (!(var > 0.0)) throw DistillError("projection: sample has zero variance");
  const double inv = 1.0 / std::sqrt(var);
  for (T& v : sample) v = static_cast<T>((v - mean) * inv);
}

template void project_unit_moments<float>(std::span<float>);
template void project_unit_moments<double>(std::span<double>);

InitialBatch init_batch(const Shape& shape, std::size_t num_classes, std::uint64_t seed) {
  if (shape.size() != 4) throw ShapeError("init_batch: shape must be [N,C,H,W], got " + shape_str(shape));
  if (num_classes < 2) throw ConfigError("init_batch: need K >= 2");
  auto rng = make_rng(seed, RngStream::distill);
  std::normal_distribution<double> normal(0.0, 1.0);
  InitialBatch b;
  b.x = Tensor<float>(shape);
  auto data = b.x.mutable_data();
  for (auto& v : data) v = static_cast<float>(normal(rng));
  const std::size_t per = data.size() / shape[0];
  for (std::size_t i = 0; i < shape[0]; ++i) project_unit_moments(data.subspan(i * per, per));
  std::uniform_int_distribution<int> label(0, static_cast<int>(num_classes) - 1);
  b.labels.resize(shape[0]);
  for (auto& y : b.labels) y = label(rng);
  return b;
}

template <typename T>
Tensor<T> bn_loss(const std::vector<ChannelStats<T>>& batch_stats,
                  const std::vector<ChannelStats<T>>& running_stats) {
  if (batch_stats.size() != running_stats.size())
    throw ShapeError(fmt::format("bn_loss: {} batch layers vs {} running layers", batch_stats.size(),
                                 running_stats.size()));
  if (batch_stats.empty()) throw ShapeError("bn_loss: no BN layers");
  Tensor<T> total;
  for (std::size_t l = 0; l < batch_stats.size(); ++l) {
    const auto& b = batch_stats[l];
    const auto& r = running_stats[l];
    if (b.mean.shape() != r.mean.shape() || b.std.shape() != r.std.shape())
      throw ShapeError(fmt::format("bn_loss: layer {} channel counts differ ({} vs {})", l,
                                   shape_str(b.mean.shape()), shape_str(r.mean.shape())));
    auto dm = ops::sub(r.mean, b.mean);
    auto ds = ops::sub(r.std, b.std);
    auto term = ops::add(ops::sum(ops::mul(dm, dm)), ops::sum(ops::mul(ds, ds)));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

template Tensor<float> bn_loss(const std::vector<ChannelStats<float>>&,
                               const std::vector<ChannelStats<float>>&);
template Tensor<double> bn_loss(const std::vector<ChannelStats<double>>&,
                                const std::vector<ChannelStats<double>>&);

template <typename T>
Tensor<T> dnn_loss(const Tensor<T>& logits, std::span<const int> labels) {
  return ops::softmax_cross_entropy(logits, labels);
}

template Tensor<float> dnn_loss(const Tensor<float>&, std::span<const int>);
template Tensor<double> dnn_loss(const Tensor<double>&, std::span<const int>);

namespace {

struct Losses {
  Tensor<float> bn, dnn, total;
};

Losses evaluate_losses(const ModelGraph& model, const Tensor<float>& x, std::span<const int> labels,
                       const std::vector<ChannelStats<float>>& targets, const DistillConfig& cfg) {
  auto result = forward(model, x, {.mode = ForwardMode::train});
  Losses l;
  l.bn = bn_loss(capture_bn_batch_stats(result), targets);
  l.dnn = dnn_loss(result.logits, labels);
  if (cfg.alpha == 0.0)
    l.total = ops::scale(l.dnn, static_cast<float>(cfg.beta));
  else if (cfg.beta == 0.0)
    l.total = ops::scale(l.bn, static_cast<float>(cfg.alpha));
  else
    l.total = ops::add(ops::scale(l.bn, static_cast<float>(cfg.alpha)),
                       ops::scale(l.dnn, static_cast<float>(cfg.beta)));
  return l;
}

}  // namespace

DistilledBatch distill(const ModelGraph& model, const DistillConfig& cfg) {
  cfg.validate();
  model.validate();
  if (model.bn_layer_indices().empty())
    throw DistillError("BN statistics unavailable: model has no batch-normalization layers");
  const auto targets = running_bn_stats(model);

  const auto& in = model.input_shape;
  auto init = init_batch({cfg.batch_size, in[0], in[1], in[2]}, model.num_classes, cfg.seed);
  DistilledBatch out;
  out.labels = std::move(init.labels);
  out.num_classes = model.num_classes;
  out.config = cfg;
  std::vector<float> x(init.x.data().begin(), init.x.data().end());
  const std::size_t per = x.size() / cfg.batch_size;
  std::vector<double> m1(x.size(), 0.0), m2(x.size(), 0.0);

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    Tensor<float> xt(init.x.shape(), x);
    xt.set_requires_grad(true);
    Losses l;
    try {
      l = evaluate_losses(model, xt, out.labels, targets, cfg);
      backward(l.total);
    } catch (const NonFiniteError& e) {
      throw DivergenceError(fmt::format("distill diverged at iteration {}: {}", it, e.what()));
    }
    out.history.push_back({it, l.bn.item(), l.dnn.item(), l.total.item()});

    // Adam step on the inputs, then re-impose per-sample mean 0 / variance 1.
    auto g = xt.grad();
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(it));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(it));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m1[i] = cfg.adam_beta1 * m1[i] + (1.0 - cfg.adam_beta1) * g[i];
      m2[i] = cfg.adam_beta2 * m2[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
      const double step = cfg.learning_rate * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + cfg.adam_eps);
      x[i] = static_cast<float>(x[i] - step);
    }
    for (std::size_t s = 0; s < cfg.batch_size; ++s)
      project_unit_moments(std::span<float>(x).subspan(s * per, per));
  }

  out.x = Tensor<float>(init.x.shape(), std::move(x));
  try {
    auto final_losses = evaluate_losses(model, out.x, out.labels, targets, cfg);
    out.final_bn_loss = final_losses.bn.item();
    out.final_dnn_loss = final_losses.dnn.item();
  } catch (const NonFiniteError& e) {
    throw DivergenceError(fmt::format("distill diverged after iteration {}: {}", cfg.iterations, e.what()));
  }
  return out;
}

void save_distilled(const DistilledBatch& batch, const std::filesystem::path& dir) {
  std::vector<std::uint8_t> xb;
  append_f32(xb, batch.x.data());
  std::vector<std::uint8_t> yb(batch.labels.size() * sizeof(std::int32_t));
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    const std::int32_t v = batch.labels[i];
    std::memcpy(yb.data() + i * sizeof v, &v, sizeof v);
  }
  const auto& c = batch.config;
  json manifest = {
      {"format", "bdfa-distilled"},
      {"format_version", 1},
      {"n", batch.x.dim(0)},
      {"shape", batch.x.shape()},
      {"num_classes", batch.num_classes},
      {"seed", c.seed},
      {"config",
       {{"batch_size", c.batch_size},
        {"iterations", c.iterations},
        {"alpha", c.alpha},
        {"beta", c.beta},
        {"learning_rate", c.learning_rate},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"adam_eps", c.adam_eps}}},
      {"initial_bn_loss", batch.history.empty() ? 0.0 : batch.history.front().bn_loss},
      {"final_bn_loss", batch.final_bn_loss},
      {"final_dnn_loss", batch.final_dnn_loss},
      {"x", {{"file", "x.bin"}, {"bytes", xb.size()}, {"crc32", crc32_of(xb)}}},
      {"labels", {{"file", "labels.bin"}, {"bytes", yb.size()}, {"crc32", crc32_of(yb)}}}};
  std::string csv = "iteration,bn_loss,dnn_loss,total\n";
  for (const auto& h : batch.history)
    csv += fmt::format("{},{:.9g},{:.9g},{:.9g}\n", h.iteration, h.bn_loss, h.dnn_loss, h.total);

  std::filesystem::create_directories(dir);
  write_file_bytes(dir / "x.bin", xb);
  write_file_bytes(dir / "labels.bin", yb);
  write_text_file(dir / "history.csv", csv);
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

DistilledBatch load_distilled(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  DistilledBatch b;
  try {
    auto m = json::parse(read_text_file(manifest_path));
    if (m.value("format", "") != "bdfa-distilled")
      throw FormatError(manifest_path.string() + ": not a distilled-batch manifest");
    if (m.at("format_version").get<int>() != 1)
      throw VersionError(manifest_path.string() + ": unsupported format_version");
    const auto shape = m.at("shape").get<Shape>();
    auto load_part = [&](const char* key) {
      auto bytes = read_file_bytes(dir / m.at(key).at("file").get<std::string>());
      if (bytes.size() != m.at(key).at("bytes").get<std::size_t>())
        throw TruncatedError(fmt::format("{}: {} has {} bytes, expected {}", dir.string(), key,
                                         bytes.size(), m.at(key).at("bytes").get<std::size_t>()));
      if (crc32_of(bytes) != m.at(key).at("crc32").get<std::uint32_t>())
        throw ChecksumError(fmt::format("{}: checksum mismatch for {}", dir.string(), key));
      return bytes;
    };
    auto xb = load_part("x");
    auto yb = load_part("labels");
    if (xb.size() != shape_numel(shape) * sizeof(float) || yb.size() != shape.at(0) * sizeof(std::int32_t))
      throw ConsistencyError(dir.string() + ": blob sizes do not match shape " + shape_str(shape));
    b.x = Tensor<float>(shape, decode_f32(xb));
    b.labels.resize(shape[0]);
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      std::int32_t v;
      std::memcpy(&v, yb.data() + i * sizeof v, sizeof v);
      b.labels[i] = v;
    }
    b.num_classes = m.at("num_classes").get<std::size_t>();
    for (int y : b.labels)
      if (y < 0 || static_cast<std::size_t>(y) >= b.num_classes)
        throw ConsistencyError(dir.string() + ": label outside [0, K)");
    const auto& c = m.at("config");
    b.config.batch_size = c.at("batch_size").get<std::size_t>();
    b.config.iterations = c.at("iterations").get<std::size_t>();
    b.config.alpha = c.at("alpha").get<double>();
    b.config.beta = c.at("beta").get<double>();
    b.config.learning_rate = c.at("learning_rate").get<double>();
    b.config.adam_beta1 = c.at("adam_beta1").get<double>();
    b.config.adam_beta2 = c.at("adam_beta2").get<double>();
    b.config.adam_eps = c.at("adam_eps").get<double>();
    b.config.seed = m.at("seed").get<std::uint64_t>();
    b.final_bn_loss = m.at("final_bn_loss").get<double>();
    b.final_dnn_loss = m.at("final_dnn_loss").get<double>();
    if (std::filesystem::exists(dir / "history.csv")) {
      std::istringstream lines(read_text_file(dir / "history.csv"));
      std::string line;
      std::getline(lines, line);  // header
      for (std::size_t lineno = 2; std::getline(lines, line); ++lineno) {
        if (line.empty()) continue;
        DistillStep h;
        char c1 = 0, c2 = 0, c3 = 0;
        std::istringstream row(line);
        if (!(row >> h.iteration >> c1 >> h.bn_loss >> c2 >> h.dnn_loss >> c3 >> h.total) || c1 != ',' ||
            c2 != ',' || c3 != ',')
          throw FormatError(fmt::format("{}:{}: malformed history row", (dir / "history.csv").string(), lineno));
        b.history.push_back(h);
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  return b;
}

}  // namespace bdfa
