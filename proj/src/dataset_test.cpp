#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "bdfa/dataset.hpp"

namespace bdfa {
namespace {

namespace fs = std::filesystem;

TEST(ToyDataset, SameSeedSameBytes) {
  auto a = load_toy_dataset("blobs4", 1000, 7), b = load_toy_dataset("blobs4", 1000, 7);
  ASSERT_EQ(a.images.numel(), b.images.numel());
  EXPECT_EQ(std::memcmp(a.images.data().data(), b.images.data().data(), a.images.numel() * sizeof(float)), 0);
  EXPECT_EQ(a.labels, b.labels);
  auto c = load_toy_dataset("blobs4", 1000, 8);
  EXPECT_NE(a.labels, c.labels);
}

TEST(ToyDataset, ShapeAndClasses) {
  auto d = load_toy_dataset("blobs4", 100, 0);
  EXPECT_EQ(d.images.shape(), (Shape{100, 3, 16, 16}));
  EXPECT_EQ(d.num_classes, 4u);
  EXPECT_NO_THROW(d.validate());
  auto r = load_toy_dataset("rings2", 50, 0);
  EXPECT_EQ(r.num_classes, 2u);
  EXPECT_NO_THROW(r.validate());
}

TEST(ToyDataset, ClassCountsBalanced) {
  for (const auto& name : toy_dataset_names()) {
    for (std::size_t m : {1000u, 999u}) {
      auto d = load_toy_dataset(name, m, 3);
      std::vector<double> counts(d.num_classes, 0);
      for (int y : d.labels) counts[y] += 1;
      const double expect = double(m) / double(d.num_classes);
      for (double c : counts) EXPECT_LE(std::abs(c - expect), 0.05 * expect) << name;
    }
  }
}

TEST(ToyDataset, NormalizedWithOwnStatistics) {
  auto d = load_toy_dataset("blobs4", 500, 1);
  const std::size_t hw = 256;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const double v = d.images[(i * 3 + ch) * hw + p];
        s += v;
        s2 += v * v;
      }
    const double n = double(d.size() * hw);
    EXPECT_NEAR(s / n, 0.0, 1e-4);
    EXPECT_NEAR(s2 / n, 1.0, 1e-3);
  }
  EXPECT_EQ(d.channel_mean.size(), 3u);
  EXPECT_EQ(d.channel_std.size(), 3u);
}

TEST(ToyDataset, TestSplitUsesTrainStatistics) {
  auto s = load_toy_splits("blobs4", 400, 100, 2);
  EXPECT_EQ(s.train.channel_mean, s.test.channel_mean);
  EXPECT_EQ(s.train.channel_std, s.test.channel_std);
  EXPECT_EQ(s.train.split, Split::train);
  EXPECT_EQ(s.test.split, Split::test);
  EXPECT_EQ(s.test.size(), 100u);
}

// 1-nearest-centroid: centroids from the train split, accuracy on test.
double nearest_centroid_accuracy(const DatasetSplits& s) {
  const std::size_t k = s.train.num_classes, p = s.train.images.numel() / s.train.size();
  std::vector<double> cent(k * p, 0.0);
  std::vector<double> count(k, 0.0);
  for (std::size_t i = 0; i < s.train.size(); ++i) {
    const int y = s.train.labels[i];
    count[y] += 1;
    for (std::size_t j = 0; j < p; ++j) cent[y * p + j] += s.train.images[i * p + j];
  }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < p; ++j) cent[c * p + j] /= count[c];
  std::size_t ok = 0;
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < k; ++c) {
      double d = 0;
      for (std::size_t j = 0; j < p; ++j) {
        const double e = s.test.images[i * p + j] - cent[c * p + j];
        d += e * e;
      }
      if (d < best_d) best_d = d, best = c;
    }
    ok += static_cast<int>(best) == s.test.labels[i];
  }
  return double(ok) / double(s.test.size());
}

TEST(ToyDataset, NearestCentroidLearnable) {
  auto s = load_toy_splits("blobs4", 2000, 400, 0);
  EXPECT_GE(nearest_centroid_accuracy(s), 0.95);
}

TEST(ToyDataset, UnknownNameRejected) {
  EXPECT_THROW(load_toy_dataset("mnist", 10, 0), DatasetError);
  EXPECT_THROW(load_toy_dataset("blobs4", 0, 0), DatasetError);
}

TEST(Dataset, GatherAndValidate) {
  auto d = load_toy_dataset("rings2", 10, 0);
  std::vector<std::size_t> idx{3, 1};
  auto x = d.gather(idx);
  EXPECT_EQ(x.shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(x[0], d.images[3 * 768]);
  EXPECT_EQ(d.gather_labels(idx), (std::vector<int>{d.labels[3], d.labels[1]}));
  std::vector<std::size_t> bad{10};
  EXPECT_THROW(d.gather(bad), DatasetError);
  d.labels[0] = 2;
  EXPECT_THROW(d.validate(), DatasetError);
}

// Writes `records` CIFAR records with label = r % classes and pixel bytes
// (r + i) % 256; CIFAR-100 records carry a coarse byte of 0xEE first.
void write_cifar(const fs::path& file, std::size_t records, bool hundred, std::size_t truncate = 0) {
  std::vector<char> bytes;
  for (std::size_t r = 0; r < records; ++r) {
    if (hundred) bytes.push_back(static_cast<char>(0xEE));
    bytes.push_back(static_cast<char>(r % (hundred ? 100 : 10)));
    for (std::size_t i = 0; i < 3072; ++i) bytes.push_back(static_cast<char>((r + i) % 256));
  }
  bytes.resize(bytes.size() - truncate);
  std::ofstream(file, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

class FakeCifar : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          (std::string("bdfa_cifar_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  fs::path dir;
};

TEST_F(FakeCifar, Cifar10Layout) {
  for (int i = 1; i <= 5; ++i) write_cifar(dir / ("data_batch_" + std::to_string(i) + ".bin"), 4, false);
  write_cifar(dir / "test_batch.bin", 3, false);
  auto s = load_cifar(dir);
  EXPECT_EQ(s.train.size(), 20u);
  EXPECT_EQ(s.test.size(), 3u);
  EXPECT_EQ(s.train.num_classes, 10u);
  EXPECT_EQ(s.train.images.shape(), (Shape{20, 3, 32, 32}));
  EXPECT_EQ(s.train.labels[0], 0);
  EXPECT_EQ(s.train.labels[3], 3);
  EXPECT_EQ(s.train.labels[4], 0);  // first record of the second file
  // Pixel 0 of record 1 is byte 1: (1/255 - mean_R) / std_R.
  const float expect = (1.0f / 255.0f - s.train.channel_mean[0]) / s.train.channel_std[0];
  EXPECT_NEAR(s.train.images[3072], expect, 1e-5);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double m = 0;
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t p = 0; p < 1024; ++p) m += s.train.images[(i * 3 + ch) * 1024 + p];
    EXPECT_LT(std::abs(m / (20.0 * 1024)), 0.05);
  }
}

TEST_F(FakeCifar, Cifar100UsesFineLabel) {
  write_cifar(dir / "train.bin", 5, true);
  write_cifar(dir / "test.bin", 2, true);
  auto s = load_cifar(dir);
  EXPECT_EQ(s.train.num_classes, 100u);
  EXPECT_EQ(s.train.labels, (std::vector<int>{0, 1, 2, 3, 4}));
}

TEST_F(FakeCifar, MissingFileNamed) {
  for (int i = 1; i <= 4; ++i) write_cifar(dir / ("data_batch_" + std::to_string(i) + ".bin"), 2, false);
  write_cifar(dir / "test_batch.bin", 2, false);
  try {
    load_cifar(dir);
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("data_batch_5.bin"), std::string::npos);
  }
}

TEST_F(FakeCifar, TruncatedFileNamed) {
  write_cifar(dir / "train.bin", 3, true, 100);
  write_cifar(dir / "test.bin", 1, true);
  try {
    load_cifar(dir);
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("train.bin"), std::string::npos);
  }
}

TEST_F(FakeCifar, EmptyDirectoryRejected) { EXPECT_THROW(load_cifar(dir), DatasetError); }

// Runs only when a real CIFAR-10 binary directory is supplied.
TEST(RealCifar, Cifar10TrainSplit) {
  const char* dir = std::getenv("BDFA_CIFAR10_DIR");
  if (!dir) GTEST_SKIP() << "BDFA_CIFAR10_DIR not set";
  auto s = load_cifar(dir);
  EXPECT_EQ(s.train.size(), 50000u);
  EXPECT_EQ(s.test.size(), 10000u);
  EXPECT_EQ(s.train.num_classes, 10u);
}

}  // namespace
}  // namespace bdfa
