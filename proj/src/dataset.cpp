#include "bdfa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "bdfa/io.hpp"
#include "bdfa/rng.hpp"

namespace bdfa {

namespace {

constexpr std::size_t kToyChannels = 3;
constexpr std::size_t kToySide = 16;

struct RawImages {
  std::vector<float> pixels;
  std::vector<int> labels;
  std::size_t c = 0, h = 0, w = 0;
  std::size_t num_classes = 0;
};

// Blob centres, one per quadrant of the 16x16 canvas.
constexpr double kBlobCentre[4][2] = {{4, 4}, {4, 12}, {12, 4}, {12, 12}};
constexpr double kBlobSigma = 2.0;
constexpr double kClassAmp = 1.0;
constexpr double kDistractorAmp = 0.5;
constexpr double kBlobNoise = 0.9;
constexpr double kRingNoise = 0.15;

// Every blobs4 image is a fixed per-class template plus heavy pixel noise:
// all four quadrants carry a blob, the class quadrant at twice the
// amplitude of the others. The shared blobs keep the classes close together,
// so a trained network is accurate but not saturated.
void fill_blob(int label, float* img) {
  for (int q = 0; q < 4; ++q) {
    const double amp = q == label ? kClassAmp : kDistractorAmp;
    const double cy = kBlobCentre[q][0], cx = kBlobCentre[q][1];
    for (std::size_t y = 0; y < kToySide; ++y)
      for (std::size_t x = 0; x < kToySide; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        const float v = static_cast<float>(amp * std::exp(-d2 / (2 * kBlobSigma * kBlobSigma)));
        for (std::size_t ch = 0; ch < kToyChannels; ++ch) img[(ch * kToySide + y) * kToySide + x] += v;
      }
  }
}

void fill_ring(std::mt19937_64& rng, int label, float* img) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double cy = 7.5 + (unit(rng) * 2.0 - 1.0);
  const double cx = 7.5 + (unit(rng) * 2.0 - 1.0);
  const double radius = (label == 0 ? 3.0 : 6.0) + (unit(rng) - 0.5);
  const double amp = 0.6 + 0.4 * unit(rng);
  double color[kToyChannels];
  for (auto& c : color) c = 0.5 + 0.5 * unit(rng);
  for (std::size_t ch = 0; ch < kToyChannels; ++ch)
    for (std::size_t y = 0; y < kToySide; ++y)
      for (std::size_t x = 0; x < kToySide; ++x) {
        const double r = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
        img[(ch * kToySide + y) * kToySide + x] += static_cast<float>(amp * color[ch] * std::exp(-(r - radius) * (r - radius) / 0.8));
      }
}

RawImages generate_toy(const std::string& name, std::size_t m, std::mt19937_64& rng) {
  RawImages raw;
  raw.c = kToyChannels;
  raw.h = raw.w = kToySide;
  if (name == "blobs4")
    raw.num_classes = 4;
  else if (name == "rings2")
    raw.num_classes = 2;
  else
    throw DatasetError("unknown toy dataset '" + name + "' (known: blobs4, rings2)");
  if (m == 0) throw DatasetError("toy dataset: M must be positive");

  raw.labels.resize(m);
  for (std::size_t i = 0; i < m; ++i) raw.labels[i] = static_cast<int>(i % raw.num_classes);
  std::shuffle(raw.labels.begin(), raw.labels.end(), rng);

  const std::size_t plane = raw.c * raw.h * raw.w;
  raw.pixels.assign(m * plane, 0.0f);
  std::normal_distribution<double> noise(0.0, name == "blobs4" ? kBlobNoise : kRingNoise);
  for (std::size_t i = 0; i < m; ++i) {
    float* img = raw.pixels.data() + i * plane;
    for (std::size_t p = 0; p < plane; ++p) img[p] = static_cast<float>(noise(rng));
    if (name == "blobs4")
      fill_blob(raw.labels[i], img);
    else
      fill_ring(rng, raw.labels[i], img);
  }
  return raw;
}

void channel_stats(const RawImages& raw, std::vector<float>& mean, std::vector<float>& sd) {
  const std::size_t hw = raw.h * raw.w, m = raw.labels.size();
  mean.assign(raw.c, 0.0f);
  sd.assign(raw.c, 1.0f);
  for (std::size_t ch = 0; ch < raw.c; ++ch) {
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const float* p = raw.pixels.data() + (i * raw.c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
    }
    const double mu = s / static_cast<double>(m * hw);
    for (std::size_t i = 0; i < m; ++i) {
      const float* p = raw.pixels.data() + (i * raw.c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) s2 += (p[k] - mu) * (p[k] - mu);
    }
    mean[ch] = static_cast<float>(mu);
    const double var = s2 / static_cast<double>(m * hw);
    sd[ch] = static_cast<float>(var > 0 ? std::sqrt(var) : 1.0);
  }
}

Dataset finish(std::string name, Split split, RawImages raw, const std::vector<float>& mean,
               const std::vector<float>& sd) {
  const std::size_t hw = raw.h * raw.w, m = raw.labels.size();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t ch = 0; ch < raw.c; ++ch) {
      float* p = raw.pixels.data() + (i * raw.c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) p[k] = (p[k] - mean[ch]) / sd[ch];
    }
  Dataset d;
  d.name = std::move(name);
  d.split = split;
  d.images = Tensor<float>({m, raw.c, raw.h, raw.w}, std::move(raw.pixels));
  d.labels = std::move(raw.labels);
  d.num_classes = raw.num_classes;
  d.channel_mean = mean;
  d.channel_std = sd;
  d.validate();
  return d;
}

}  // namespace

Tensor<float> Dataset::gather(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DatasetError(name + ": empty selection");
  Shape shape = images.shape();
  const std::size_t plane = images.numel() / shape[0];
  std::vector<float> out(indices.size() * plane);
  auto src = images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw DatasetError(fmt::format("{}: index {} out of range", name, indices[i]));
    std::copy_n(src.begin() + indices[i] * plane, plane, out.begin() + i * plane);
  }
  shape[0] = indices.size();
  return Tensor<float>(std::move(shape), std::move(out));
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

void Dataset::validate() const {
  if (!images.defined() || images.rank() != 4 || images.dim(0) != labels.size())
    throw DatasetError(name + ": image/label count mismatch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw DatasetError(fmt::format("{}: label {} outside [0,{})", name, y, num_classes));
}

std::vector<std::string> toy_dataset_names() { return {"blobs4", "rings2"}; }

Dataset load_toy_dataset(const std::string& name, std::size_t m, std::uint64_t seed) {
  auto rng = make_rng(seed, RngStream::dataset);
  RawImages raw = generate_toy(name, m, rng);
  std::vector<float> mean, sd;
  channel_stats(raw, mean, sd);
  return finish(name, Split::train, std::move(raw), mean, sd);
}

DatasetSplits load_toy_splits(const std::string& name, std::size_t m_train, std::size_t m_test,
                              std::uint64_t seed) {
  auto rng_train = make_rng(seed, RngStream::dataset);
  auto rng_test = make_rng(seed, RngStream::test_split);
  RawImages train = generate_toy(name, m_train, rng_train);
  RawImages test = generate_toy(name, m_test, rng_test);
  std::vector<float> mean, sd;
  channel_stats(train, mean, sd);
  DatasetSplits s;
  s.train = finish(name, Split::train, std::move(train), mean, sd);
  s.test = finish(name, Split::test, std::move(test), mean, sd);
  return s;
}

namespace {

RawImages read_cifar_files(const std::vector<std::filesystem::path>& files, std::size_t label_bytes,
                           std::size_t num_classes) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  const std::size_t record = label_bytes + kPixels;
  RawImages raw;
  raw.c = 3;
  raw.h = raw.w = 32;
  raw.num_classes = num_classes;
  for (const auto& f : files) {
    if (!std::filesystem::exists(f)) throw DatasetError("missing CIFAR file " + f.string());
    auto bytes = read_file_bytes(f);
    if (bytes.empty() || bytes.size() % record != 0)
      throw DatasetError(fmt::format("truncated CIFAR file {} ({} bytes, record size {})", f.string(),
                                     bytes.size(), record));
    const std::size_t n = bytes.size() / record;
    for (std::size_t r = 0; r < n; ++r) {
      const std::uint8_t* rec = bytes.data() + r * record;
      const int label = rec[label_bytes - 1];
      if (static_cast<std::size_t>(label) >= num_classes)
        throw DatasetError(fmt::format("{}: record {} has label {} >= {}", f.string(), r, label, num_classes));
      raw.labels.push_back(label);
      for (std::size_t p = 0; p < kPixels; ++p)
        raw.pixels.push_back(static_cast<float>(rec[label_bytes + p]) / 255.0f);
    }
  }
  return raw;
}

}  // namespace

DatasetSplits load_cifar(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> train_files, test_files;
  std::size_t label_bytes = 1, num_classes = 10;
  std::string name;
  if (std::filesystem::exists(dir / "data_batch_1.bin")) {
    name = "cifar10";
    for (int i = 1; i <= 5; ++i) train_files.push_back(dir / fmt::format("data_batch_{}.bin", i));
    test_files.push_back(dir / "test_batch.bin");
  } else if (std::filesystem::exists(dir / "train.bin")) {
    name = "cifar100";
    label_bytes = 2;
    num_classes = 100;
    train_files.push_back(dir / "train.bin");
    test_files.push_back(dir / "test.bin");
  } else {
    throw DatasetError("no CIFAR binary files in " + dir.string() +
                       " (expected data_batch_1.bin or train.bin)");
  }
  RawImages train = read_cifar_files(train_files, label_bytes, num_classes);
  RawImages test = read_cifar_files(test_files, label_bytes, num_classes);
  std::vector<float> mean, sd;
  channel_stats(train, mean, sd);
  DatasetSplits s;
  s.train = finish(name, Split::train, std::move(train), mean, sd);
  s.test = finish(name, Split::test, std::move(test), mean, sd);
  return s;
}

}  // namespace bdfa
