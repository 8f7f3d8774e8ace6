#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bdfa/model.hpp"

namespace bdfa {

namespace fs = std::filesystem;

inline constexpr int kModelFormatVersion = 1;
inline constexpr char kModelManifest[] = "manifest.json";
inline constexpr char kModelBlob[] = "weights.bin";

// Model directory: manifest.json (architecture, K, input shape, per-tensor
// offsets/shapes/CRC32) + weights.bin (8-byte magic, then little-endian
// float32 tensors; quantized layers store int8 codes instead of weights).
void save_model(const ModelGraph& model, const fs::path& dir);
ModelGraph load_model(const fs::path& dir);

// Byte helpers shared by the on-disk formats.
std::vector<std::uint8_t> read_file_bytes(const fs::path& path);
void write_file_bytes(const fs::path& path, std::span<const std::uint8_t> bytes);
std::string read_text_file(const fs::path& path);
void write_text_file(const fs::path& path, const std::string& text);
std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

void append_f32(std::vector<std::uint8_t>& out, std::span<const float> values);
std::vector<float> decode_f32(std::span<const std::uint8_t> bytes);

}  // namespace bdfa
