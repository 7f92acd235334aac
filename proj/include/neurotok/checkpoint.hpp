#pragma once

// Single-file model checkpoint:
//   8-byte magic "NTCKPT01"
//   u64 little-endian manifest length
//   JSON manifest {"config": ..., "tensors": [{"name", "shape", "offset"}]}
//   float32 little-endian payload (offsets count floats)

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurotok/error.hpp"
#include "neurotok/signal_io.hpp"

namespace neurotok {

inline constexpr char kCheckpointMagic[9] = "NTCKPT01";

struct CheckpointTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  template <class T>
  void add(std::string name, std::vector<std::size_t> shape, const std::vector<T>& values) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    if (n != values.size()) throw ShapeError("checkpoint tensor " + name + ": value count does not match shape");
    if (find(name)) throw ValidationError("duplicate checkpoint tensor " + name);
    CheckpointTensor t{std::move(name), std::move(shape), {}};
    t.data.reserve(values.size());
    for (T v : values) t.data.push_back(static_cast<float>(v));
    tensors.push_back(std::move(t));
  }

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  const CheckpointTensor& at(const std::string& name) const {
    if (auto* t = find(name)) return *t;
    throw ValidationError("checkpoint has no tensor named " + name);
  }
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json manifest;
  manifest["config"] = ckpt.config;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.data.size();
  }
  const std::string text = manifest.dump();
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 8);
  const auto len = static_cast<std::uint64_t>(text.size());
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>((len >> (8 * b)) & 0xFFu));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + 4 * offset);
  for (const auto& t : ckpt.tensors)
    for (float v : t.data) detail::put_f32_le(out, v);
  detail::write_bytes(path, out.data(), out.size());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_bytes(path);
  if (bytes.size() < 16 || !std::equal(kCheckpointMagic, kCheckpointMagic + 8, bytes.begin()))
    throw ValidationError("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b) len |= static_cast<std::uint64_t>(bytes[8 + b]) << (8 * b);
  if (len > bytes.size() - 16) throw ValidationError("checkpoint manifest is truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  const std::size_t payload_start = 16 + len;
  const std::size_t payload_floats = (bytes.size() - payload_start) / 4;
  if ((bytes.size() - payload_start) % 4 != 0) throw ValidationError("checkpoint payload is not float32 aligned");

  Checkpoint ckpt;
  try {
    ckpt.config = manifest.value("config", nlohmann::json::object());
    for (const auto& jt : manifest.at("tensors")) {
      CheckpointTensor t;
      t.name = jt.at("name").get<std::string>();
      t.shape = jt.at("shape").get<std::vector<std::size_t>>();
      const auto offset = jt.at("offset").get<std::size_t>();
      std::size_t n = 1;
      for (auto d : t.shape) n *= d;
      if (offset > payload_floats || n > payload_floats - offset)
        throw ValidationError("checkpoint tensor " + t.name + " extends past the payload");
      t.data.resize(n);
      for (std::size_t i = 0; i < n; ++i) t.data[i] = detail::get_f32_le(bytes.data() + payload_start + 4 * (offset + i));
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return ckpt;
}

}  // namespace neurotok
