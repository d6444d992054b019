// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "medtune/errors.hpp"
#include "medtune/model.hpp"

namespace medtune {
namespace {

constexpr char kMagic[8] = {'M', 'D', 'T', 'C', 'K', 'P', 'T', '1'};

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
  return v;
}

void write_floats(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values) {
      const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(f));
      os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
}

void read_floats(std::istream& is, std::span<float> values) {
  is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
  if constexpr (std::endian::native == std::endian::big) {
    for (float& f : values) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
  }
}

}  // namespace

nlohmann::json Checkpoint::meta() const { return nlohmann::json::parse(meta_json); }

const BasicTensor<float>& Checkpoint::at(std::string_view name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return nt.tensor;
  }
  throw InputError("checkpoint has no tensor '" + std::string(name) + "'");
}

bool Checkpoint::contains(std::string_view name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& nt) { return nt.name == name; });
}

void write_checkpoint(const std::string& path, const nlohmann::json& meta,
                      const std::vector<NamedTensor<float>>& tensors) {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& nt : tensors) {
    index.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}, {"offset", offset}});
    offset += nt.tensor.numel() * sizeof(float);
  }
  const std::string header = nlohmann::json{{"meta", meta}, {"tensors", index}}.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path);
  os.write(kMagic, sizeof kMagic);
  const std::uint64_t len = to_le(static_cast<std::uint64_t>(header.size()));
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& nt : tensors) write_floats(os, nt.tensor.data());
  if (!os) throw IoError("failed writing checkpoint " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint " + path);
  char magic[sizeof kMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw InputError(path + ": not a medtune checkpoint");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  len = to_le(len);
  std::string header(len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(len));
  if (!is) throw InputError(path + ": truncated checkpoint header");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path + ": malformed checkpoint header: " + e.what());
  }
  Checkpoint ckpt;
  ckpt.meta_json = h.at("meta").dump();
  const auto payload_start = is.tellg();
  for (const auto& entry : h.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<float> values(n);
    is.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    read_floats(is, values);
    if (!is) throw InputError(path + ": truncated payload for " + entry.at("name").get<std::string>());
    ckpt.tensors.push_back({entry.at("name").get<std::string>(), Tensor::from_data(std::move(shape), std::move(values))});
  }
  return ckpt;
}

void save_model(const std::string& path, const TransformerWeights<float>& weights) {
  write_checkpoint(path, {{"kind", "model"}, {"config", weights.config}}, weights.named_tensors());
}

TransformerWeights<float> model_from_checkpoint(const Checkpoint& ckpt) {
  const auto meta = ckpt.meta();
  if (meta.value("kind", "") != "model") throw InputError("checkpoint is not a model checkpoint");
  const auto config = meta.at("config").get<ModelConfig>();
  config.validate();
  TransformerWeights<float> w = init_model<float>(config, 0);
  for (auto& nt : w.named_tensors()) {
    const Tensor& src = ckpt.at(nt.name);
    if (src.shape() != nt.tensor.shape()) {
      throw InputError("checkpoint tensor " + nt.name + " has shape " + shape_string(src.shape()) + ", expected " +
                       shape_string(nt.tensor.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), nt.tensor.data().begin());
  }
  return w;
}

TransformerWeights<float> load_model(const std::string& path) { return model_from_checkpoint(read_checkpoint(path)); }

}  // namespace medtune
