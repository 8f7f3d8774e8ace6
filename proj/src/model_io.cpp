#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <zlib.h>

#include "bdfa/io.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

namespace bdfa {

using nlohmann::json;

namespace {

constexpr char kBlobMagic[8] = {'B', 'D', 'F', 'A', 'B', 'L', 'O', 'B'};

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text_file(const fs::path& path) {
  auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void write_text_file(const fs::path& path, const std::string& text) {
  write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

void append_f32(std::vector<std::uint8_t>& out, std::span<const float> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * sizeof(float));
  std::memcpy(out.data() + start, values.data(), values.size() * sizeof(float));
}

std::vector<float> decode_f32(std::span<const std::uint8_t> bytes) {
  std::vector<float> v(bytes.size() / sizeof(float));
  std::memcpy(v.data(), bytes.data(), v.size() * sizeof(float));
  return v;
}

void save_model(const ModelGraph& model, const fs::path& dir) {
  model.validate();
  std::vector<std::uint8_t> blob(std::begin(kBlobMagic), std::end(kBlobMagic));
  json tensors = json::array();
  json layers = json::array();

  auto add = [&](std::size_t layer, const std::string& role, const Shape& shape,
                 std::span<const std::uint8_t> bytes, const char* dtype) {
    const std::size_t offset = blob.size();
    blob.insert(blob.end(), bytes.begin(), bytes.end());
    tensors.push_back({{"name", fmt::format("layers.{}.{}", layer, role)},
                       {"layer", layer},
                       {"role", role},
                       {"dtype", dtype},
                       {"shape", shape},
                       {"offset", offset},
                       {"bytes", bytes.size()},
                       {"crc32", crc32_of(bytes)}});
  };
  auto add_f32 = [&](std::size_t layer, const std::string& role, const Shape& shape,
                     std::span<const float> values) {
    std::vector<std::uint8_t> bytes;
    append_f32(bytes, values);
    add(layer, role, shape, bytes, "f32");
  };

  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    json lj = {{"kind", layer_kind_name(l.kind)},
               {"in_channels", l.in_channels},
               {"out_channels", l.out_channels},
               {"kernel", l.kernel},
               {"stride", l.stride},
               {"pad", l.pad},
               {"skip", l.skip}};
    if (l.kind == LayerKind::batchnorm2d) lj["bn_momentum"] = l.bn.momentum;
    if (l.quant) lj["quant"] = {{"bits", l.quant->bits}, {"delta", l.quant->delta}};
    layers.push_back(lj);

    if (l.attackable()) {
      if (l.quant) {
        std::span<const std::uint8_t> codes{reinterpret_cast<const std::uint8_t*>(l.quant->codes.data()),
                                            l.quant->codes.size()};
        add(i, "codes", l.weight.shape, codes, "i8");
      } else {
        add_f32(i, "weight", l.weight.shape, l.weight.values);
      }
      if (l.bias.defined()) add_f32(i, "bias", l.bias.shape, l.bias.values);
    } else if (l.kind == LayerKind::batchnorm2d) {
      add_f32(i, "gamma", l.weight.shape, l.weight.values);
      add_f32(i, "beta", l.bias.shape, l.bias.values);
      add_f32(i, "running_mean", {l.in_channels}, l.bn.running_mean);
      add_f32(i, "running_var", {l.in_channels}, l.bn.running_var);
    }
  }

  json manifest = {{"format", "bdfa-model"},
                   {"format_version", kModelFormatVersion},
                   {"arch", model.arch},
                   {"num_classes", model.num_classes},
                   {"input_shape", model.input_shape},
                   {"blob", kModelBlob},
                   {"blob_bytes", blob.size()},
                   {"layers", layers},
                   {"tensors", tensors}};
  fs::create_directories(dir);
  write_file_bytes(dir / kModelBlob, blob);
  write_text_file(dir / kModelManifest, manifest.dump(2) + "\n");
}

ModelGraph load_model(const fs::path& dir) {
  const fs::path manifest_path = dir / kModelManifest;
  if (!fs::exists(manifest_path)) throw IoError("missing " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }

  ModelGraph model;
  std::vector<std::uint8_t> blob;
  try {
    if (manifest.value("format", "") != "bdfa-model")
      throw FormatError(manifest_path.string() + ": not a bdfa-model manifest");
    const int version = manifest.at("format_version").get<int>();
    if (version != kModelFormatVersion)
      throw VersionError(fmt::format("{}: format_version {} unsupported (expected {})",
                                     manifest_path.string(), version, kModelFormatVersion));

    const fs::path blob_path = dir / manifest.at("blob").get<std::string>();
    blob = read_file_bytes(blob_path);
    if (blob.size() < sizeof(kBlobMagic) ||
        std::memcmp(blob.data(), kBlobMagic, sizeof(kBlobMagic)) != 0)
      throw FormatError(blob_path.string() + ": bad magic bytes");
    if (blob.size() < manifest.at("blob_bytes").get<std::size_t>())
      throw TruncatedError(fmt::format("{}: {} bytes, manifest declares {}", blob_path.string(),
                                       blob.size(), manifest.at("blob_bytes").get<std::size_t>()));

    model.arch = manifest.at("arch").get<std::string>();
    model.num_classes = manifest.at("num_classes").get<std::size_t>();
    model.input_shape = manifest.at("input_shape").get<std::array<std::size_t, 3>>();
    for (const auto& lj : manifest.at("layers")) {
      Layer l;
      l.kind = layer_kind_from_name(lj.at("kind").get<std::string>());
      l.in_channels = lj.at("in_channels").get<std::size_t>();
      l.out_channels = lj.at("out_channels").get<std::size_t>();
      l.kernel = lj.at("kernel").get<std::size_t>();
      l.stride = lj.at("stride").get<std::size_t>();
      l.pad = lj.at("pad").get<std::size_t>();
      l.skip = lj.at("skip").get<int>();
      if (lj.contains("bn_momentum")) l.bn.momentum = lj.at("bn_momentum").get<float>();
      if (lj.contains("quant")) {
        l.quant = QuantizedLayer{};
        l.quant->bits = lj.at("quant").at("bits").get<int>();
        l.quant->delta = lj.at("quant").at("delta").get<float>();
      }
      model.layers.push_back(std::move(l));
    }

    for (const auto& tj : manifest.at("tensors")) {
      const auto name = tj.at("name").get<std::string>();
      const auto layer = tj.at("layer").get<std::size_t>();
      const auto role = tj.at("role").get<std::string>();
      const auto shape = tj.at("shape").get<Shape>();
      const auto offset = tj.at("offset").get<std::size_t>();
      const auto bytes = tj.at("bytes").get<std::size_t>();
      if (layer >= model.layers.size())
        throw ConsistencyError(name + ": refers to missing layer " + std::to_string(layer));
      if (offset + bytes > blob.size())
        throw TruncatedError(fmt::format("{}: tensor {} extends past end of blob", dir.string(), name));
      std::span<const std::uint8_t> raw{blob.data() + offset, bytes};
      if (crc32_of(raw) != tj.at("crc32").get<std::uint32_t>())
        throw ChecksumError(fmt::format("{}: checksum mismatch for {}", dir.string(), name));
      const std::string dtype = tj.at("dtype").get<std::string>();
      const std::size_t elem = dtype == "i8" ? 1 : 4;
      if (bytes != shape_numel(shape) * elem)
        throw ConsistencyError(name + ": byte count does not match shape " + shape_str(shape));

      Layer& l = model.layers[layer];
      if (role == "codes") {
        if (!l.quant) throw ConsistencyError(name + ": codes for an unquantized layer");
        l.quant->codes.resize(bytes);
        std::memcpy(l.quant->codes.data(), raw.data(), bytes);
        l.weight = ParamArray{shape, {}};
        continue;
      }
      auto values = decode_f32(raw);
      if (role == "weight" || role == "gamma")
        l.weight = ParamArray{shape, std::move(values)};
      else if (role == "bias" || role == "beta")
        l.bias = ParamArray{shape, std::move(values)};
      else if (role == "running_mean")
        l.bn.running_mean = std::move(values);
      else if (role == "running_var")
        l.bn.running_var = std::move(values);
      else
        throw FormatError(name + ": unknown tensor role '" + role + "'");
    }
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  model.validate();
  return model;
}

}  // namespace bdfa
