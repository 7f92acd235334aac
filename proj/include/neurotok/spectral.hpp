#pragma once

// Short-time Fourier analysis at several resolutions.
//
// Frames are fully interior (no centre padding): frame t covers samples
// [t*hop, t*hop + window). A periodic Hann window is applied and only the
// one-sided spectrum (window/2 + 1 bins) is kept.

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "neurotok/error.hpp"
#include "neurotok/matrix.hpp"

namespace neurotok {

struct StftScale {
  std::size_t window_length = 0;
  std::size_t hop_length = 0;

  std::size_t bins() const noexcept { return window_length / 2 + 1; }
  std::size_t frames(std::size_t n) const noexcept {
    return n < window_length ? 0 : (n - window_length) / hop_length + 1;
  }
  bool operator==(const StftScale&) const = default;
};

struct StftConfig {
  std::vector<StftScale> scales;

  // Five scales, largest (512, 128), each subsequent one halved.
  static StftConfig defaults() {
    StftConfig cfg;
    for (std::size_t w = 512, h = 128; w >= 32; w /= 2, h /= 2) cfg.scales.push_back({w, h});
    return cfg;
  }

  std::size_t max_window() const noexcept {
    std::size_t m = 0;
    for (const auto& s : scales) m = std::max(m, s.window_length);
    return m;
  }

  void validate() const {
    if (scales.empty()) throw ValidationError("STFT config needs at least one scale");
    for (const auto& s : scales)
      if (!(s.window_length > s.hop_length && s.hop_length > 0))
        throw ValidationError("STFT scale requires window_length > hop_length > 0");
  }

  bool operator==(const StftConfig&) const = default;
};

template <class T>
std::vector<T> hann_window(std::size_t n) {
  std::vector<T> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = static_cast<T>(0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                               static_cast<double>(n)));
  return w;
}

inline bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

// Forward DFT in place (sign -1). Radix-2 when the size allows, direct
// summation otherwise.
template <class T>
void fft_inplace(std::vector<std::complex<T>>& a) {
  const std::size_t n = a.size();
  if (n <= 1) return;
  if (!is_power_of_two(n)) {
    std::vector<std::complex<T>> out(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::complex<T> acc{};
      for (std::size_t j = 0; j < n; ++j) {
        const double theta = -2.0 * std::numbers::pi * static_cast<double>((k * j) % n) / static_cast<double>(n);
        acc += a[j] * std::complex<T>(static_cast<T>(std::cos(theta)), static_cast<T>(std::sin(theta)));
      }
      out[k] = acc;
    }
    a.swap(out);
    return;
  }
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  // Twiddles for the largest stage; stage `len` uses every (n/len)-th one.
  std::vector<std::complex<T>> tw(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    tw[k] = {static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang))};
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2, step = n / len;
    for (std::size_t i = 0; i < n; i += len)
      for (std::size_t k = 0; k < half; ++k) {
        const auto w = tw[k * step];
        const auto u = a[i + k];
        const auto x = a[i + k + half];
        // Plain complex product; std::complex's operator* adds inf/nan recovery.
        const std::complex<T> v(x.real() * w.real() - x.imag() * w.imag(), x.real() * w.imag() + x.imag() * w.real());
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
  }
}

// Complex spectrum [bins, frames].
struct Spectrum {
  StftScale scale;
  Matrix<std::complex<double>> values;

  Matrix<double> magnitude() const {
    Matrix<double> m(values.rows(), values.cols());
    for (std::size_t i = 0; i < values.size(); ++i) m.data()[i] = std::abs(values.data()[i]);
    return m;
  }
  Matrix<double> angle() const {
    Matrix<double> m(values.rows(), values.cols());
    for (std::size_t i = 0; i < values.size(); ++i) m.data()[i] = std::arg(values.data()[i]);
    return m;
  }
};

template <class T>
Spectrum stft(std::span<const T> x, std::size_t window_length, std::size_t hop_length) {
  const StftScale scale{window_length, hop_length};
  if (window_length == 0 || hop_length == 0) throw ValidationError("STFT window and hop must be positive");
  if (x.size() < window_length)
    throw ValidationError("input of length " + std::to_string(x.size()) + " is shorter than STFT window " +
                          std::to_string(window_length));
  const auto win = hann_window<double>(window_length);
  const std::size_t frames = scale.frames(x.size());
  const std::size_t bins = scale.bins();
  Spectrum out{scale, Matrix<std::complex<double>>(bins, frames)};
  std::vector<std::complex<double>> buf(window_length);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t start = t * hop_length;
    for (std::size_t n = 0; n < window_length; ++n) buf[n] = {static_cast<double>(x[start + n]) * win[n], 0.0};
    fft_inplace(buf);
    for (std::size_t k = 0; k < bins; ++k) out.values(k, t) = buf[k];
  }
  return out;
}

template <class T>
std::vector<Spectrum> multi_scale_spectra(std::span<const T> x, const StftConfig& cfg) {
  cfg.validate();
  std::vector<Spectrum> out;
  out.reserve(cfg.scales.size());
  for (const auto& s : cfg.scales) out.push_back(stft(x, s.window_length, s.hop_length));
  return out;
}

}  // namespace neurotok
