#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "cytograd/error.hpp"
#include "cytograd/model.hpp"

/// Checkpoint container (all integers little-endian):
///
///   bytes 0..7    magic "CYTOCKPT"
///   bytes 8..11   u32 format version (1)
///   bytes 12..19  u64 header length L
///   next L bytes  UTF-8 JSON header (sorted keys):
///                 {"backbone": {...}, "config_hash": "<16 hex>",
///                  "pipeline": "combined", "tensors": [{"name", "shape"}...]}
///   remainder     float64 values of every tensor, in header order, row-major
namespace cytograd {

inline constexpr char kCheckpointMagic[8] = {'C', 'Y', 'T', 'O', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json backbone_to_json(const Backbone& bb) {
  return {{"in_channels", bb.in_channels}, {"input_size", bb.input_size},
          {"conv_channels", bb.conv_channels}, {"kernel", bb.kernel},
          {"pool", bb.pool}, {"hidden", bb.hidden}};
}

inline Backbone backbone_from_json(const nlohmann::json& j) {
  Backbone bb;
  try {
    bb.in_channels = j.value("in_channels", bb.in_channels);
    bb.input_size = j.value("input_size", bb.input_size);
    bb.conv_channels = j.value("conv_channels", bb.conv_channels);
    bb.kernel = j.value("kernel", bb.kernel);
    bb.pool = j.value("pool", bb.pool);
    bb.hidden = j.value("hidden", bb.hidden);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("backbone: ") + e.what());
  }
  bb.validate();
  return bb;
}

struct Checkpoint {
  ModelParams params;
  std::string config_hash;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t offset) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return value;
}

}  // namespace detail

inline std::string checkpoint_to_bytes(const Checkpoint& ckpt) {
  ckpt.params.validate();
  nlohmann::json header;
  header["backbone"] = backbone_to_json(ckpt.params.backbone);
  header["pipeline"] = std::string(to_string(ckpt.params.kind));
  header["config_hash"] = ckpt.config_hash;
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : ckpt.params.tensors) {
    header["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}});
  }
  const std::string header_text = header.dump();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  for (const auto& t : ckpt.params.tensors) {
    for (double v : t.value.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw ConfigError("not a checkpoint file (bad magic)");
  }
  if (const auto version = detail::get_le<std::uint32_t>(bytes, 8); version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = detail::get_le<std::uint64_t>(bytes, 12);
  if (header_len > bytes.size() - 20) throw ConfigError("truncated checkpoint header");

  Checkpoint ckpt;
  std::size_t offset = 20 + header_len;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(20, header_len));
    ckpt.params.backbone = backbone_from_json(header.at("backbone"));
    ckpt.params.kind = parse_pipeline_kind(header.at("pipeline").get<std::string>());
    ckpt.config_hash = header.at("config_hash").get<std::string>();
    for (const auto& entry : header.at("tensors")) {
      Shape shape = entry.at("shape").get<Shape>();
      const std::size_t count = element_count(shape);
      if (count * 8 > bytes.size() - offset) throw ConfigError("truncated checkpoint payload");
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i) {
        values[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, offset + 8 * i));
      }
      offset += 8 * count;
      ckpt.params.tensors.push_back({entry.at("name").get<std::string>(),
                                     Tensor(std::move(shape), std::move(values))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("malformed checkpoint tensor: ") + e.what());
  }
  if (offset != bytes.size()) throw ConfigError("trailing bytes after checkpoint payload");
  ckpt.params.validate();
  return ckpt;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, checkpoint_to_bytes(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_bytes(read_file(path));
}

}  // namespace cytograd
