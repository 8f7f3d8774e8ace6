#include "bdfa/quant.hpp"

#include <bit>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "bdfa/io.hpp"
#include "json.hpp"

namespace bdfa {

namespace {

void check_bits(int bits) {
  if (bits < kMinBits || bits > kMaxBits)
    throw QuantizationError(fmt::format("bit width {} outside [{}, {}]", bits, kMinBits, kMaxBits));
}

void check_bit(int bit, int bits) {
  if (bit < 0 || bit >= bits)
    throw QuantizationError(fmt::format("bit position {} outside [0, {}]", bit, bits - 1));
}

unsigned mask_for(int bits) { return (1u << bits) - 1u; }

// Sign-extend the low `bits` bits.
int from_twos(unsigned raw, int bits) {
  raw &= mask_for(bits);
  return (raw & (1u << (bits - 1))) ? static_cast<int>(raw) - (1 << bits) : static_cast<int>(raw);
}

}  // namespace

QuantizedLayer quantize_weights(std::span<const float> weights, int bits, std::size_t layer_id) {
  check_bits(bits);
  double max_abs = 0.0;
  for (float w : weights) {
    if (!std::isfinite(w)) throw QuantizationError(fmt::format("layer {}: non-finite weight", layer_id));
    max_abs = std::max(max_abs, std::fabs(static_cast<double>(w)));
  }
  if (max_abs == 0.0)
    throw QuantizationError(fmt::format("layer {}: all-zero weights, step size undefined", layer_id));
  const int top = (1 << (bits - 1)) - 1;
  QuantizedLayer q;
  q.bits = bits;
  q.delta = static_cast<float>(max_abs / top);
  q.codes.resize(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    // Ratio taken against max|w| exactly; nearbyint rounds half to even.
    const double scaled = std::nearbyint(static_cast<double>(weights[i]) * top / max_abs);
    q.codes[i] = static_cast<std::int8_t>(std::clamp(scaled, -static_cast<double>(top),
                                                     static_cast<double>(top)));
  }
  return q;
}

ModelGraph quantize_model(const ModelGraph& model, int bits) {
  check_bits(bits);
  model.validate();
  ModelGraph out = model;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    Layer& l = out.layers[i];
    if (!l.attackable()) continue;
    l.quant = quantize_weights(l.effective_weight(), bits, i);
    l.weight.values.clear();
  }
  return out;
}

int flip_bit(int code, int bit, int bits) {
  check_bits(bits);
  check_bit(bit, bits);
  const int lo = -(1 << (bits - 1)), hi = (1 << (bits - 1)) - 1;
  if (code < lo || code > hi)
    throw QuantizationError(fmt::format("code {} not representable in {} bits", code, bits));
  return from_twos(static_cast<unsigned>(code) ^ (1u << bit), bits);
}

int bit_value(int code, int bit, int bits) {
  check_bits(bits);
  check_bit(bit, bits);
  return static_cast<int>((static_cast<unsigned>(code) >> bit) & 1u);
}

std::pair<int, int> apply_flip(ModelGraph& model, const BitAddress& a) {
  if (a.layer >= model.layers.size() || !model.layers[a.layer].quant)
    throw QuantizationError(fmt::format("flip: layer {} is not a quantized layer", a.layer));
  auto& q = *model.layers[a.layer].quant;
  if (a.weight_index >= q.codes.size())
    throw QuantizationError(fmt::format("flip: weight index {} out of range for layer {} ({} weights)",
                                        a.weight_index, a.layer, q.codes.size()));
  const int before = q.codes[a.weight_index];
  const int after = flip_bit(before, a.bit, q.bits);
  q.codes[a.weight_index] = static_cast<std::int8_t>(after);
  return {before, after};
}

std::vector<double> bit_gradients(const QuantizedLayer& layer, std::span<const float> weight_grads) {
  if (weight_grads.size() != layer.codes.size())
    throw QuantizationError(fmt::format("bit_gradients: {} weight gradients for {} weights",
                                        weight_grads.size(), layer.codes.size()));
  const int q = layer.bits;
  std::vector<double> out(weight_grads.size() * q);
  for (std::size_t w = 0; w < weight_grads.size(); ++w) {
    const double base = static_cast<double>(weight_grads[w]) * layer.delta;
    for (int i = 0; i < q - 1; ++i) out[w * q + i] = base * std::ldexp(1.0, i);
    out[w * q + q - 1] = -base * std::ldexp(1.0, q - 1);
  }
  return out;
}

std::size_t hamming_distance(std::span<const std::int8_t> original, std::span<const std::int8_t> current,
                             int bits) {
  check_bits(bits);
  if (original.size() != current.size())
    throw QuantizationError(fmt::format("hamming_distance: lengths differ ({} vs {})", original.size(),
                                        current.size()));
  std::size_t d = 0;
  for (std::size_t i = 0; i < original.size(); ++i)
    d += std::popcount((static_cast<unsigned>(original[i]) ^ static_cast<unsigned>(current[i])) &
                       mask_for(bits));
  return d;
}

std::size_t hamming_distance(const ModelGraph& original, const ModelGraph& current) {
  if (original.layers.size() != current.layers.size())
    throw QuantizationError("hamming_distance: models have different layer counts");
  std::size_t d = 0;
  for (std::size_t i = 0; i < original.layers.size(); ++i) {
    const auto& a = original.layers[i].quant;
    const auto& b = current.layers[i].quant;
    if (!a && !b) continue;
    if (!a || !b || a->bits != b->bits)
      throw QuantizationError(fmt::format("hamming_distance: layer {} quantization differs", i));
    d += hamming_distance(a->codes, b->codes, a->bits);
  }
  return d;
}

void write_flip_records_jsonl(const std::filesystem::path& path, std::span<const FlipRecord> records) {
  std::string text;
  for (const auto& r : records) {
    nlohmann::json j = {{"layer", r.address.layer},
                        {"weight_index", r.address.weight_index},
                        {"bit", r.address.bit},
                        {"code_before", r.code_before},
                        {"code_after", r.code_after},
                        {"loss_before", r.loss_before},
                        {"loss_after", r.loss_after}};
    if (r.accuracy_after) j["accuracy_after"] = *r.accuracy_after;
    text += j.dump() + "\n";
  }
  write_text_file(path, text);
}

std::vector<FlipRecord> read_flip_records_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<FlipRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      FlipRecord r;
      r.address = {j.at("layer").get<std::size_t>(), j.at("weight_index").get<std::size_t>(),
                   j.at("bit").get<int>()};
      r.code_before = j.at("code_before").get<int>();
      r.code_after = j.at("code_after").get<int>();
      r.loss_before = j.at("loss_before").get<double>();
      r.loss_after = j.at("loss_after").get<double>();
      if (j.contains("accuracy_after")) r.accuracy_after = j.at("accuracy_after").get<double>();
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
  return out;
}

}  // namespace bdfa
