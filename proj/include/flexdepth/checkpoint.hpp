#pragma once

// Checkpoint file layout:
//
//   u64 little-endian   header byte length H
//   H bytes             JSON header: {"format", "version", "config", "step",
//                       "tensors": [{"name", "shape", "offset", "bytes"}]}
//   data section        raw little-endian float32 blocks in header order;
//                       offsets are relative to the start of this section
//
// Files are written to a temporary name and renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdepth/config.hpp"
#include "flexdepth/errors.hpp"
#include "flexdepth/model.hpp"

namespace flexdepth {

inline constexpr const char* kCheckpointFormat = "flexdepth-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  std::int64_t step = 0;
};

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

inline void write_floats(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values) {
      const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

inline void read_floats(std::istream& in, std::span<float> values) {
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(float)));
  if constexpr (std::endian::native != std::endian::little) {
    for (float& f : values) f = std::bit_cast<float>(to_little_endian(std::bit_cast<std::uint32_t>(f)));
  }
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                            std::int64_t step = 0) {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  header["config"] = params.config;
  header["step"] = step;
  auto& entries = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  params.for_each_parameter([&](const std::string& name, const Tensor& t) {
    const std::uint64_t bytes = t.numel() * sizeof(float);
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  });
  const std::string text = header.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    std::uint64_t length = text.size();
    unsigned char prefix[8];
    for (int k = 0; k < 8; ++k) prefix[k] = static_cast<unsigned char>((length >> (8 * k)) & 0xff);
    out.write(reinterpret_cast<const char*>(prefix), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    params.for_each_parameter(
        [&](const std::string&, const Tensor& t) { detail::write_floats(out, t.data()); });
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline nlohmann::json read_checkpoint_header(std::istream& in, const std::filesystem::path& path) {
  unsigned char prefix[8];
  in.read(reinterpret_cast<char*>(prefix), 8);
  if (!in) throw IoError("checkpoint " + path.string() + " is truncated");
  std::uint64_t length = 0;
  for (int k = 0; k < 8; ++k) length |= static_cast<std::uint64_t>(prefix[k]) << (8 * k);
  if (length > (64u << 20)) throw IoError("checkpoint " + path.string() + " has a corrupt header");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw IoError("checkpoint " + path.string() + " is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + path.string() + " header is not JSON: " + e.what());
  }
  if (header.value("format", "") != kCheckpointFormat) {
    throw IoError(path.string() + " is not a flexdepth checkpoint");
  }
  return header;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  const auto header = read_checkpoint_header(in, path);
  Checkpoint ckpt;
  const auto config = header.at("config").get<ModelConfig>();
  ckpt.params = zero_params(config);
  ckpt.step = header.value("step", std::int64_t{0});

  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : header.at("tensors")) entries[e.at("name").get<std::string>()] = e;
  const auto data_start = in.tellg();
  ckpt.params.for_each_parameter([&](const std::string& name, Tensor& t) {
    auto it = entries.find(name);
    if (it == entries.end()) throw IoError("checkpoint " + path.string() + " lacks tensor " + name);
    const auto shape = it->second.at("shape").get<Shape>();
    if (shape != t.shape()) {
      throw IoError("checkpoint tensor " + name + " has shape " + shape_string(shape) +
                    ", expected " + shape_string(t.shape()));
    }
    in.seekg(data_start + static_cast<std::streamoff>(it->second.at("offset").get<std::uint64_t>()));
    detail::read_floats(in, t.mutable_data());
    if (!in) throw IoError("checkpoint " + path.string() + " is truncated in tensor " + name);
  });
  return ckpt;
}

namespace detail {

inline void require_same_config(const ModelConfig& a, const ModelConfig& b,
                                const std::filesystem::path& path) {
  const nlohmann::json ja = a;
  const nlohmann::json jb = b;
  for (const auto& [key, value] : ja.items()) {
    if (jb.at(key) != value) {
      throw IncompatibilityError("checkpoint " + path.string() + " differs in '" + key + "': " +
                                 value.dump() + " vs " + jb.at(key).dump());
    }
  }
}

}  // namespace detail

/// Parameter-wise arithmetic mean of checkpoints with identical configs.
inline ModelParams average_checkpoints(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw ConfigError("average_checkpoints: no checkpoints given");
  Checkpoint first = load_checkpoint(paths.front());
  std::vector<std::vector<double>> sums;
  first.params.for_each_parameter([&](const std::string&, const Tensor& t) {
    sums.emplace_back(t.data().begin(), t.data().end());
  });
  for (std::size_t k = 1; k < paths.size(); ++k) {
    const Checkpoint next = load_checkpoint(paths[k]);
    detail::require_same_config(first.params.config, next.params.config, paths[k]);
    std::size_t index = 0;
    next.params.for_each_parameter([&](const std::string&, const Tensor& t) {
      auto& acc = sums[index++];
      const auto values = t.data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += values[i];
    });
  }
  const auto count = static_cast<double>(paths.size());
  std::size_t index = 0;
  first.params.for_each_parameter([&](const std::string&, Tensor& t) {
    const auto& acc = sums[index++];
    auto out = t.mutable_data();
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / count);
  });
  return std::move(first.params);
}

}  // namespace flexdepth
