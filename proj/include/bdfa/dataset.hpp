#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bdfa/tensor.hpp"

namespace bdfa {

enum class Split { train, test };

struct Dataset {
  std::string name;
  Split split = Split::train;
  Tensor<float> images;  // [M,C,H,W], per-channel normalized
  std::vector<int> labels;
  std::size_t num_classes = 0;
  // Statistics the images were normalized with (from the train split).
  std::vector<float> channel_mean;
  std::vector<float> channel_std;

  std::size_t size() const { return labels.size(); }
  // Gathers the given samples into a new [n,C,H,W] tensor.
  Tensor<float> gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  // Throws DatasetError on a label outside [0, K) or image/label count mismatch.
  void validate() const;
};

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

std::vector<std::string> toy_dataset_names();

// Procedural image classes on 3x16x16 canvases:
//   blobs4 - a Gaussian blob in each quadrant; the class quadrant's blob is
//            twice as bright as the rest. Pixel noise sigma 0.9.
//   rings2 - a ring around the (jittered) canvas centre; small radius is
//            class 0, large radius class 1. Pixel noise sigma 0.15.
// Labels are balanced (i mod K, shuffled).
// Normalized with the generated set's own per-channel statistics.
Dataset load_toy_dataset(const std::string& name, std::size_t m, std::uint64_t seed);

// Train and test splits from independent streams of the same seed; the test
// split is normalized with the train split's statistics.
DatasetSplits load_toy_splits(const std::string& name, std::size_t m_train, std::size_t m_test,
                              std::uint64_t seed);

// CIFAR binary format. CIFAR-10: data_batch_{1..5}.bin + test_batch.bin with
// records [label][3072 pixels]; CIFAR-100: train.bin + test.bin with records
// [coarse][fine][3072 pixels] (fine label used). Pixels are R, G, B planes of
// 32x32, scaled to [0,1] and normalized per channel with train statistics.
DatasetSplits load_cifar(const std::filesystem::path& dir);

}  // namespace bdfa
