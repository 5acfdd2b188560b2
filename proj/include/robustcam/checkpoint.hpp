#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "robustcam/errors.hpp"
#include "robustcam/model.hpp"

namespace robustcam {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline nlohmann::ordered_json arch_to_json(const ModelArch& a) {
  nlohmann::ordered_json blocks = nlohmann::ordered_json::array();
  for (const auto& b : a.blocks) blocks.push_back({{"layers", b.layers}, {"growth", b.growth}});
  return {{"input_height", a.input_height},
          {"input_width", a.input_width},
          {"num_classes", a.num_classes},
          {"stem_channels", a.stem_channels},
          {"stem_downsample", a.stem_downsample},
          {"blocks", blocks},
          {"transition_channels", a.transition_channels},
          {"transition_downsample", a.transition_downsample},
          {"min_feature_extent", a.min_feature_extent}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline ModelArch arch_from_json(const nlohmann::json& j, ModelArch a = {}) {
  if (!j.is_object()) throw ConfigError("model: expected an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "input_height") a.input_height = v.get<std::size_t>();
      else if (key == "input_width") a.input_width = v.get<std::size_t>();
      else if (key == "num_classes") a.num_classes = v.get<std::size_t>();
      else if (key == "stem_channels") a.stem_channels = v.get<std::size_t>();
      else if (key == "stem_downsample") a.stem_downsample = v.get<std::size_t>();
      else if (key == "transition_channels") a.transition_channels = v.get<std::vector<std::size_t>>();
      else if (key == "transition_downsample") a.transition_downsample = v.get<std::vector<std::size_t>>();
      else if (key == "min_feature_extent") a.min_feature_extent = v.get<std::size_t>();
      else if (key == "blocks") {
        a.blocks.clear();
        for (const auto& b : v) a.blocks.push_back(BlockSpec{b.at("layers").get<std::size_t>(), b.at("growth").get<std::size_t>()});
      } else {
        throw ConfigError("model: unknown key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return a;
}

inline constexpr char kCheckpointMagic[8] = {'R', 'C', 'A', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout, all integers little-endian:
//   magic[8] | u32 version | u32 len | arch JSON | u32 count |
//   count x { u32 len | name | u32 rank | u32 dims[rank] | f32 data[] } |
//   u64 FNV-1a of every preceding byte
inline std::string encode_checkpoint(const CamModel& model) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  auto put_u32 = [&](std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
  auto put_str = [&](const std::string& s) {
    put_u32(static_cast<std::uint32_t>(s.size()));
    out += s;
  };
  put_u32(kCheckpointVersion);
  put_str(arch_to_json(model.arch()).dump());
  put_u32(static_cast<std::uint32_t>(model.parameters().size()));
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto& p = model.parameters()[i];
    put_str(model.parameter_names()[i]);
    put_u32(static_cast<std::uint32_t>(p.rank()));
    for (auto d : p.shape()) put_u32(static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(p.data().data()), p.size() * sizeof(float));
  }
  const std::uint64_t h = fnv1a64(out);
  out.append(reinterpret_cast<const char*>(&h), 8);
  return out;
}

inline CamModel decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + 12) throw CheckpointError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw CheckpointError("unrecognized checkpoint format or version (bad magic bytes)");
  }
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  std::size_t pos = sizeof kCheckpointMagic;
  auto need = [&](std::size_t n) {
    if (body.size() - pos < n) throw CheckpointError("checkpoint truncated");
  };
  auto get_u32 = [&] {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, body.data() + pos, 4);
    pos += 4;
    return v;
  };
  auto get_str = [&] {
    const std::uint32_t n = get_u32();
    need(n);
    std::string s(body.substr(pos, n));
    pos += n;
    return s;
  };
  const std::uint32_t version = get_u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (stored != fnv1a64(body)) throw CheckpointError("checkpoint checksum mismatch (corrupt or truncated)");

  ModelArch arch;
  try {
    arch = arch_from_json(nlohmann::json::parse(get_str()));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint arch descriptor unreadable: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint arch descriptor invalid: ") + e.what());
  }
  const std::uint32_t count = get_u32();
  std::vector<std::string> names;
  std::vector<Tensor> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    names.push_back(get_str());
    const std::uint32_t rank = get_u32();
    if (rank > 8) throw CheckpointError("checkpoint tensor rank " + std::to_string(rank) + " is implausible");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = get_u32();
      if (d == 0) throw CheckpointError("checkpoint tensor has a zero extent");
      n *= d;
    }
    need(n * sizeof(float));
    std::vector<float> values(n);
    std::memcpy(values.data(), body.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);
    params.emplace_back(shape, std::move(values));
  }
  if (pos != body.size()) throw CheckpointError("checkpoint has trailing bytes");
  try {
    return CamModel(arch, std::move(names), std::move(params));
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint does not match its architecture: ") + e.what());
  }
}

inline void save_checkpoint(const CamModel& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

inline CamModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace robustcam
