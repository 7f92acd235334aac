#pragma once

// Band-pass filtering, resampling, jittered window extraction and
// story-level splitting of neural recordings.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "neurotok/error.hpp"
#include "neurotok/matrix.hpp"
#include "neurotok/rng.hpp"
#include "neurotok/signal_io.hpp"

namespace neurotok {

// ---------------------------------------------------------------------------
// Butterworth band-pass

// One biquad, direct form II transposed: a0 is normalised to 1.
struct Biquad {
  std::array<double, 3> b{};
  std::array<double, 2> a{};  // a1, a2

  std::complex<double> response(double omega) const {
    const std::complex<double> z1 = std::polar(1.0, -omega);
    const std::complex<double> z2 = z1 * z1;
    return (b[0] + b[1] * z1 + b[2] * z2) / (1.0 + a[0] * z1 + a[1] * z2);
  }
};

struct BandpassFilter {
  double sample_rate_hz = 0.0;
  double low_hz = 0.0;
  double high_hz = 0.0;
  int prototype_order = 4;
  std::vector<Biquad> sections;

  // Single-pass complex response at `freq_hz`.
  std::complex<double> response(double freq_hz) const {
    const double omega = 2.0 * std::numbers::pi * freq_hz / sample_rate_hz;
    std::complex<double> h = 1.0;
    for (const auto& s : sections) h *= s.response(omega);
    return h;
  }

  // Gain of the forward-backward (zero-phase) application, in dB.
  double zero_phase_gain_db(double freq_hz) const {
    return 20.0 * std::log10(std::norm(response(freq_hz)));
  }

  std::size_t order() const noexcept { return 2 * sections.size(); }
};

// Analog Butterworth prototype -> band-pass transform -> bilinear transform
// with pre-warped edges. Produces `order` biquads (band-pass order 2*order).
inline BandpassFilter design_butterworth_bandpass(double low_hz, double high_hz, double sample_rate_hz,
                                                  int order = 4) {
  const double nyquist = sample_rate_hz / 2.0;
  if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist))
    throw ValidationError("band edges must satisfy 0 < low < high < Nyquist (" + std::to_string(nyquist) + " Hz)");
  if (order < 1) throw ValidationError("filter order must be positive");

  using cd = std::complex<double>;
  const double fs2 = 2.0 * sample_rate_hz;
  const double w1 = fs2 * std::tan(std::numbers::pi * low_hz / sample_rate_hz);
  const double w2 = fs2 * std::tan(std::numbers::pi * high_hz / sample_rate_hz);
  const double bw = w2 - w1;
  const double w0 = std::sqrt(w1 * w2);

  std::vector<cd> poles;
  for (int k = 0; k < order; ++k) {
    const cd p = std::polar(1.0, std::numbers::pi * (2.0 * k + order + 1) / (2.0 * order));
    const cd scaled = p * (bw / 2.0);
    const cd disc = std::sqrt(scaled * scaled - w0 * w0);
    poles.push_back(scaled + disc);
    poles.push_back(scaled - disc);
  }
  // Gain of the analog band-pass is bw^order with `order` zeros at s = 0.
  // Bilinear map: s=0 -> z=+1, and `order` extra zeros at z=-1.
  cd gain = std::pow(bw, order);
  cd num = 1.0, den = 1.0;
  for (int k = 0; k < order; ++k) num *= cd(fs2, 0.0);
  for (const auto& p : poles) den *= (fs2 - p);
  gain *= num / den;

  std::vector<cd> zpoles;
  for (const auto& p : poles) zpoles.push_back((fs2 + p) / (fs2 - p));
  // Keep one of each conjugate pair (upper half plane).
  std::vector<cd> upper;
  for (const auto& p : zpoles)
    if (p.imag() > 0.0) upper.push_back(p);
  if (upper.size() != static_cast<std::size_t>(order))
    throw Error("band-pass design produced unpaired poles");
  std::sort(upper.begin(), upper.end(), [](const cd& a, const cd& b) { return std::abs(a) < std::abs(b); });

  BandpassFilter f;
  f.sample_rate_hz = sample_rate_hz;
  f.low_hz = low_hz;
  f.high_hz = high_hz;
  f.prototype_order = order;
  for (const auto& p : upper) {
    Biquad s;
    s.b = {1.0, 0.0, -1.0};
    s.a = {-2.0 * p.real(), std::norm(p)};
    f.sections.push_back(s);
  }
  f.sections.front().b = {gain.real(), 0.0, -gain.real()};
  return f;
}

namespace detail {

// Runs the cascade with every section started in its steady state for a
// constant input equal to x[0].
inline void sos_filter(const std::vector<Biquad>& sections, std::vector<double>& x) {
  if (x.empty()) return;
  double level = x.front();
  for (const auto& s : sections) {
    const double dc_gain = (s.b[0] + s.b[1] + s.b[2]) / (1.0 + s.a[0] + s.a[1]);
    const double y_ss = level * dc_gain;
    double z1 = y_ss - s.b[0] * level;
    double z2 = s.b[2] * level - s.a[1] * y_ss;
    for (double& v : x) {
      const double in = v;
      const double y = s.b[0] * in + z1;
      z1 = s.b[1] * in - s.a[0] * y + z2;
      z2 = s.b[2] * in - s.a[1] * y;
      v = y;
    }
    level = y_ss;
  }
}

}  // namespace detail

// Zero-phase application with mirror (even) reflection padding of 3x the
// filter order at both ends.
inline std::vector<double> filtfilt(const BandpassFilter& f, std::span<const double> x) {
  const std::size_t n = x.size();
  const std::size_t pad = std::min<std::size_t>(3 * f.order(), n > 1 ? n - 1 : 0);
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(x[n - 1 - i]);

  detail::sos_filter(f.sections, ext);
  std::reverse(ext.begin(), ext.end());
  detail::sos_filter(f.sections, ext);
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

inline NeuralSignal bandpass(const NeuralSignal& signal, double low_hz = 0.1, double high_hz = 85.0) {
  const auto f = design_butterworth_bandpass(low_hz, high_hz, signal.header.sample_rate_hz);
  NeuralSignal out = signal;
  std::vector<double> row(signal.samples.cols());
  for (std::size_t c = 0; c < signal.samples.rows(); ++c) {
    const auto src = signal.samples.row(c);
    std::copy(src.begin(), src.end(), row.begin());
    const auto filtered = filtfilt(f, row);
    auto dst = out.samples.row(c);
    for (std::size_t t = 0; t < filtered.size(); ++t) dst[t] = static_cast<float>(filtered[t]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rational-ratio polyphase resampling

class Resampler {
 public:
  static constexpr int kHalfTaps = 32;  // 64 taps per phase
  static constexpr double kKaiserBeta = 8.0;

  Resampler(double source_hz, double target_hz) : source_hz_(source_hz), target_hz_(target_hz) {
    if (!(source_hz > 0.0) || !(target_hz > 0.0)) throw ValidationError("sample rates must be positive");
    // Rates are reduced on a millihertz grid.
    const auto s = static_cast<std::uint64_t>(std::llround(source_hz * 1000.0));
    const auto t = static_cast<std::uint64_t>(std::llround(target_hz * 1000.0));
    const auto g = std::gcd(s, t);
    up_ = t / g;
    down_ = s / g;
    cutoff_ = std::min(1.0, static_cast<double>(up_) / static_cast<double>(down_));
  }

  std::size_t up() const noexcept { return up_; }
  std::size_t down() const noexcept { return down_; }

  std::size_t output_length(std::size_t n) const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(n) * target_hz_ / source_hz_));
  }

  std::vector<double> apply(std::span<const double> x) {
    const std::size_t n_out = output_length(x.size());
    std::vector<double> y(n_out, 0.0);
    const auto n = static_cast<std::int64_t>(x.size());
    for (std::size_t m = 0; m < n_out; ++m) {
      // Output m sits at input position m*down/up = base + phase/up.
      const std::uint64_t num = static_cast<std::uint64_t>(m) * down_;
      const auto base = static_cast<std::int64_t>(num / up_);
      const auto& taps = phase_taps(num % up_);
      double acc = 0.0;
      for (int k = 0; k < 2 * kHalfTaps; ++k) {
        std::int64_t idx = base - kHalfTaps + 1 + k;
        if (n == 1) {
          idx = 0;
        } else {
          // Whole-sample symmetric reflection at both ends.
          const std::int64_t period = 2 * (n - 1);
          idx = ((idx % period) + period) % period;
          if (idx >= n) idx = period - idx;
        }
        acc += taps[static_cast<std::size_t>(k)] * x[static_cast<std::size_t>(idx)];
      }
      y[m] = acc;
    }
    return y;
  }

 private:
  const std::vector<double>& phase_taps(std::uint64_t phase) {
    auto it = cache_.find(phase);
    if (it != cache_.end()) return it->second;
    const double frac = static_cast<double>(phase) / static_cast<double>(up_);
    std::vector<double> taps(2 * kHalfTaps);
    const double i0_beta = std::cyl_bessel_i(0.0, kKaiserBeta);
    double sum = 0.0;
    for (int k = 0; k < 2 * kHalfTaps; ++k) {
      const double u = static_cast<double>(k - kHalfTaps + 1) - frac;  // input offset from output time
      const double r = u / static_cast<double>(kHalfTaps);
      const double win = std::abs(r) >= 1.0 ? 0.0
                                             : std::cyl_bessel_i(0.0, kKaiserBeta * std::sqrt(1.0 - r * r)) / i0_beta;
      const double arg = cutoff_ * u;
      const double sinc = arg == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
      taps[static_cast<std::size_t>(k)] = cutoff_ * sinc * win;
      sum += taps[static_cast<std::size_t>(k)];
    }
    for (double& t : taps) t /= sum;  // unit DC gain per phase
    return cache_.emplace(phase, std::move(taps)).first->second;
  }

  double source_hz_;
  double target_hz_;
  std::size_t up_ = 1;
  std::size_t down_ = 1;
  double cutoff_ = 1.0;
  std::unordered_map<std::uint64_t, std::vector<double>> cache_;
};

inline NeuralSignal resample(const NeuralSignal& signal, double target_hz = 400.0) {
  Resampler rs(signal.header.sample_rate_hz, target_hz);
  const std::size_t n_out = rs.output_length(signal.header.num_samples);
  if (n_out == 0) throw ValidationError("resampled signal would be empty");
  NeuralSignal out;
  out.header = signal.header;
  out.header.sample_rate_hz = target_hz;
  out.header.num_samples = n_out;
  out.samples = Matrix<float>(signal.samples.rows(), n_out);
  std::vector<double> row(signal.samples.cols());
  for (std::size_t c = 0; c < signal.samples.rows(); ++c) {
    const auto src = signal.samples.row(c);
    std::copy(src.begin(), src.end(), row.begin());
    const auto y = rs.apply(row);
    auto dst = out.samples.row(c);
    for (std::size_t t = 0; t < n_out; ++t) dst[t] = static_cast<float>(y[t]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windows

struct WindowedSample {
  Matrix<float> signal;  // [C, W]
  std::string story_id;
  double start_time_s = 0.0;
  std::optional<std::string> transcript;
  std::optional<std::vector<int>> speech_codes;

  bool operator==(const WindowedSample&) const = default;
};

struct WindowParams {
  double window_s = 4.0;
  double stride_s = 1.0;
  double jitter_s = 0.5;
};

inline std::size_t window_count(double duration_s, const WindowParams& p) {
  if (duration_s + 1e-9 < p.window_s) return 0;
  return static_cast<std::size_t>(std::floor((duration_s - p.window_s) / p.stride_s + 1e-9)) + 1;
}

// Starts are k*stride + U(-jitter, +jitter), clamped into the signal. The
// random stream for a story is seeded with seed ^ fnv1a(story_id).
inline std::vector<WindowedSample> extract_windows(const NeuralSignal& signal, const WindowParams& params,
                                                   std::uint64_t seed) {
  if (!(params.window_s > 0.0) || !(params.stride_s > 0.0) || params.jitter_s < 0.0)
    throw ValidationError("window, stride must be positive and jitter non-negative");
  const double fs = signal.header.sample_rate_hz;
  const std::size_t total = signal.header.num_samples;
  const auto width = static_cast<std::size_t>(std::llround(params.window_s * fs));
  const double duration = static_cast<double>(total) / fs;
  if (width == 0 || width > total)
    throw ValidationError("signal of " + std::to_string(duration) + " s is shorter than one " +
                          std::to_string(params.window_s) + " s window");
  const std::size_t count = window_count(duration, params);
  const std::string story = signal.header.story_id.value_or("");
  SplitMix64 rng(seed ^ fnv1a64(story));
  const double max_start = duration - params.window_s;

  std::vector<WindowedSample> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    double start = static_cast<double>(k) * params.stride_s + params.jitter_s * (2.0 * rng.uniform() - 1.0);
    start = std::clamp(start, 0.0, std::max(0.0, max_start));
    auto first = static_cast<std::size_t>(std::llround(start * fs));
    first = std::min(first, total - width);
    WindowedSample w;
    w.signal = Matrix<float>(signal.samples.rows(), width);
    for (std::size_t c = 0; c < signal.samples.rows(); ++c) {
      const auto src = signal.samples.row(c).subspan(first, width);
      std::copy(src.begin(), src.end(), w.signal.row(c).begin());
    }
    w.story_id = story;
    w.start_time_s = static_cast<double>(first) / fs;
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Word-onset annotations

struct WordOnset {
  std::string word;
  double onset_s = 0.0;
  std::string story_id;
  std::optional<std::vector<int>> speech_codes;
};

inline std::vector<WordOnset> read_word_onsets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<WordOnset> words;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      WordOnset w;
      w.word = j.at("word").get<std::string>();
      w.onset_s = j.at("onset_s").get<double>();
      w.story_id = j.at("story_id").get<std::string>();
      if (j.contains("speech_codes")) w.speech_codes = j["speech_codes"].get<std::vector<int>>();
      words.push_back(std::move(w));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": malformed annotation line: " + e.what(), line_no);
    }
  }
  return words;
}

inline void write_word_onsets(const std::vector<WordOnset>& words, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& w : words) {
    nlohmann::json j{{"word", w.word}, {"onset_s", w.onset_s}, {"story_id", w.story_id}};
    if (w.speech_codes) j["speech_codes"] = *w.speech_codes;
    out << j.dump() << '\n';
  }
}

// Transcript = words whose onset lies in [start, start + window), in onset
// order; speech codes are concatenated the same way.
inline void attach_annotations(std::vector<WindowedSample>& windows, const std::vector<WordOnset>& words,
                               double window_s) {
  std::map<std::string, std::vector<const WordOnset*>> by_story;
  for (const auto& w : words) by_story[w.story_id].push_back(&w);
  for (auto& [story, list] : by_story)
    std::stable_sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->onset_s < b->onset_s; });

  for (auto& win : windows) {
    auto it = by_story.find(win.story_id);
    if (it == by_story.end()) continue;
    std::string text;
    std::vector<int> codes;
    bool any_codes = false;
    for (const auto* w : it->second) {
      if (w->onset_s < win.start_time_s || w->onset_s >= win.start_time_s + window_s) continue;
      if (!text.empty()) text += ' ';
      text += w->word;
      if (w->speech_codes) {
        any_codes = true;
        codes.insert(codes.end(), w->speech_codes->begin(), w->speech_codes->end());
      }
    }
    if (!text.empty()) win.transcript = text;
    if (any_codes) win.speech_codes = std::move(codes);
  }
}

// ---------------------------------------------------------------------------
// Story-level splits

struct SplitSpec {
  std::vector<std::string> train_stories{"easy money", "the black willow"};
  std::vector<std::string> val_stories{"lw1"};
  std::vector<std::string> test_stories{"cable spool fort"};

  void validate() const {
    std::set<std::string> seen;
    for (const auto* list : {&train_stories, &val_stories, &test_stories})
      for (const auto& s : *list)
        if (!seen.insert(s).second) throw ValidationError("story listed in more than one split: " + s);
  }

  static SplitSpec from_json(const nlohmann::json& j) {
    SplitSpec s;
    try {
      s.train_stories = j.at("train").get<std::vector<std::string>>();
      s.val_stories = j.at("val").get<std::vector<std::string>>();
      s.test_stories = j.at("test").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed split spec: ") + e.what());
    }
    s.validate();
    return s;
  }

  nlohmann::json to_json() const { return {{"train", train_stories}, {"val", val_stories}, {"test", test_stories}}; }
};

struct OverlapAudit {
  std::size_t shared_sentences = 0;  // distinct transcripts present in both train and test
  std::size_t shared_words = 0;      // distinct words present in both
};

struct DatasetSplit {
  std::vector<WindowedSample> train, val, test;
  OverlapAudit audit;
};

inline OverlapAudit audit_overlap(const std::vector<WindowedSample>& a, const std::vector<WindowedSample>& b) {
  auto collect = [](const std::vector<WindowedSample>& xs, std::set<std::string>& sentences,
                    std::set<std::string>& words) {
    for (const auto& x : xs) {
      if (!x.transcript) continue;
      sentences.insert(*x.transcript);
      std::size_t pos = 0;
      const auto& t = *x.transcript;
      while (pos < t.size()) {
        const auto end = t.find(' ', pos);
        const auto w = t.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
        if (!w.empty()) words.insert(w);
        if (end == std::string::npos) break;
        pos = end + 1;
      }
    }
  };
  std::set<std::string> sa, wa, sb, wb;
  collect(a, sa, wa);
  collect(b, sb, wb);
  OverlapAudit audit;
  for (const auto& s : sa) audit.shared_sentences += sb.count(s);
  for (const auto& w : wa) audit.shared_words += wb.count(w);
  return audit;
}

inline DatasetSplit split_dataset(std::vector<WindowedSample> samples, const SplitSpec& spec) {
  spec.validate();
  auto in = [](const std::vector<std::string>& list, const std::string& s) {
    return std::find(list.begin(), list.end(), s) != list.end();
  };
  DatasetSplit out;
  for (auto& s : samples) {
    if (in(spec.train_stories, s.story_id))
      out.train.push_back(std::move(s));
    else if (in(spec.val_stories, s.story_id))
      out.val.push_back(std::move(s));
    else if (in(spec.test_stories, s.story_id))
      out.test.push_back(std::move(s));
    else
      throw ValidationError("sample story '" + s.story_id + "' is not assigned to any split");
  }
  out.audit = audit_overlap(out.train, out.test);
  return out;
}

}  // namespace neurotok
