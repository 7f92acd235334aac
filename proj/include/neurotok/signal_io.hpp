#pragma once

// Multi-channel recordings on disk: a JSON header sidecar (`<name>.json`)
// plus channel-major little-endian float32 samples (`<name>.f32`).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurotok/error.hpp"
#include "neurotok/matrix.hpp"

namespace neurotok {

inline constexpr double kDefaultCalibrationUnitFt = 200.0;

struct SignalHeader {
  double sample_rate_hz = 0.0;
  std::vector<std::string> channel_names;
  std::size_t num_samples = 0;
  double calibration_unit_ft = kDefaultCalibrationUnitFt;
  std::optional<std::string> story_id;
  std::optional<std::string> subject_id;

  std::size_t num_channels() const noexcept { return channel_names.size(); }
  double duration_s() const noexcept { return static_cast<double>(num_samples) / sample_rate_hz; }

  bool operator==(const SignalHeader&) const = default;

  void validate() const {
    if (!(sample_rate_hz > 0.0) || !std::isfinite(sample_rate_hz))
      throw ValidationError("sample_rate_hz must be positive");
    if (num_samples == 0) throw ValidationError("num_samples must be positive");
    if (!(calibration_unit_ft > 0.0)) throw ValidationError("calibration_unit_ft must be positive");
    if (channel_names.empty()) throw ValidationError("at least one channel is required");
    std::set<std::string> seen;
    for (const auto& name : channel_names) {
      if (name.empty()) throw ValidationError("channel names must be non-empty");
      if (!seen.insert(name).second) throw ValidationError("duplicate channel name: " + name);
    }
  }
};

// Calibrated samples, shape [C, T].
struct NeuralSignal {
  SignalHeader header;
  Matrix<float> samples;

  bool operator==(const NeuralSignal&) const = default;

  void validate() const {
    header.validate();
    if (samples.rows() != header.num_channels())
      throw ValidationError("sample rows do not match channel count");
    if (samples.cols() != header.num_samples)
      throw ValidationError("sample columns do not match num_samples");
    for (float v : samples.data())
      if (!std::isfinite(v)) throw ValidationError("non-finite sample value");
  }
};

inline nlohmann::json header_to_json(const SignalHeader& h) {
  nlohmann::json j;
  j["sample_rate_hz"] = h.sample_rate_hz;
  j["channel_names"] = h.channel_names;
  j["num_samples"] = h.num_samples;
  j["calibration_unit_ft"] = h.calibration_unit_ft;
  if (h.story_id) j["story_id"] = *h.story_id;
  if (h.subject_id) j["subject_id"] = *h.subject_id;
  return j;
}

inline SignalHeader header_from_json(const nlohmann::json& j) {
  SignalHeader h;
  try {
    h.sample_rate_hz = j.at("sample_rate_hz").get<double>();
    h.channel_names = j.at("channel_names").get<std::vector<std::string>>();
    const auto n = j.at("num_samples").get<std::int64_t>();
    if (n <= 0) throw ValidationError("num_samples must be positive");
    h.num_samples = static_cast<std::size_t>(n);
    h.calibration_unit_ft = j.value("calibration_unit_ft", kDefaultCalibrationUnitFt);
    if (j.contains("story_id")) h.story_id = j["story_id"].get<std::string>();
    if (j.contains("subject_id")) h.subject_id = j["subject_id"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed signal header: ") + e.what());
  }
  h.validate();
  return h;
}

namespace detail {

// `<name>`, `<name>.json` and `<name>.f32` all name the same pair.
inline std::filesystem::path signal_stem(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  if (ext == ".json" || ext == ".f32") return path.parent_path() / path.stem();
  return path;
}

inline std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

inline void put_f32_le(std::vector<unsigned char>& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xFFu));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const void* data, std::size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed: " + p.string());
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  write_bytes(p, text.data(), text.size());
}

inline std::string read_text(const std::filesystem::path& p) {
  auto bytes = read_bytes(p);
  return {bytes.begin(), bytes.end()};
}

}  // namespace detail

inline void write_signal(const NeuralSignal& signal, const std::filesystem::path& path) {
  signal.validate();
  const auto stem = detail::signal_stem(path);
  std::vector<unsigned char> payload;
  payload.reserve(signal.samples.size() * 4);
  for (float v : signal.samples.data()) detail::put_f32_le(payload, v);
  detail::write_bytes(detail::with_suffix(stem, ".f32"), payload.data(), payload.size());
  detail::write_text(detail::with_suffix(stem, ".json"), header_to_json(signal.header).dump(2) + "\n");
}

inline NeuralSignal read_signal(const std::filesystem::path& path) {
  const auto stem = detail::signal_stem(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text(detail::with_suffix(stem, ".json")));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("malformed signal header: ") + e.what());
  }
  NeuralSignal s;
  s.header = header_from_json(j);
  const auto bytes = detail::read_bytes(detail::with_suffix(stem, ".f32"));
  const std::size_t expected = s.header.num_channels() * s.header.num_samples;
  if (bytes.size() % 4 != 0 || bytes.size() / 4 != expected)
    throw ValidationError("sample count mismatch: header expects " + std::to_string(expected) +
                          " values, file holds " + std::to_string(bytes.size() / 4));
  std::vector<float> values(expected);
  for (std::size_t i = 0; i < expected; ++i) values[i] = detail::get_f32_le(bytes.data() + 4 * i);
  s.samples = Matrix<float>(s.header.num_channels(), s.header.num_samples, std::move(values));
  s.validate();
  return s;
}

// Tesla -> multiples of `unit_ft` femtotesla.
inline Matrix<float> calibrate(const Matrix<double>& raw_tesla, double unit_ft) {
  if (!(unit_ft > 0.0)) throw ValidationError("calibration unit must be positive");
  const double scale = unit_ft * 1e-15;
  Matrix<float> out(raw_tesla.rows(), raw_tesla.cols());
  for (std::size_t i = 0; i < raw_tesla.size(); ++i)
    out.data()[i] = static_cast<float>(raw_tesla.data()[i] / scale);
  return out;
}

}  // namespace neurotok
