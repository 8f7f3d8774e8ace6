#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "bdfa/model.hpp"

namespace bdfa {

// One bit of one quantized weight. `layer` indexes ModelGraph::layers;
// bit bits-1 is the two's-complement sign bit.
struct BitAddress {
  std::size_t layer = 0;
  std::size_t weight_index = 0;
  int bit = 0;

  auto operator<=>(const BitAddress&) const = default;
};

struct FlipRecord {
  BitAddress address;
  int code_before = 0;
  int code_after = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::optional<double> accuracy_after;
};

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;

// Symmetric per-tensor quantizer: delta = max|w| / (2^(bits-1) - 1),
// code = round_half_even(w / delta). Throws QuantizationError for an
// all-zero tensor (delta undefined).
QuantizedLayer quantize_weights(std::span<const float> weights, int bits, std::size_t layer_id = 0);

// Quantizes every conv/linear weight; biases and BN parameters stay float.
ModelGraph quantize_model(const ModelGraph& model, int bits = 8);

// Toggle one two's-complement bit of a `bits`-wide code.
int flip_bit(int code, int bit, int bits = 8);
int bit_value(int code, int bit, int bits = 8);

// Applies a flip to the model's codes; returns {code_before, code_after}.
std::pair<int, int> apply_flip(ModelGraph& model, const BitAddress& address);

// dL/db for every bit of every weight, laid out [weight][bit]. Non-sign bit
// i: dL/dw * delta * 2^i; sign bit: dL/dw * delta * -2^(bits-1).
std::vector<double> bit_gradients(const QuantizedLayer& layer, std::span<const float> weight_grads);

std::size_t hamming_distance(std::span<const std::int8_t> original,
                             std::span<const std::int8_t> current, int bits = 8);
// Total differing bits over every quantized layer of two same-architecture models.
std::size_t hamming_distance(const ModelGraph& original, const ModelGraph& current);

// One FlipRecord per line (JSON lines).
void write_flip_records_jsonl(const std::filesystem::path& path, std::span<const FlipRecord> records);
std::vector<FlipRecord> read_flip_records_jsonl(const std::filesystem::path& path);

}  // namespace bdfa
