#pragma once

// Seeded synthetic signals: band-limited Gaussian noise plus a few
// sinusoids, and a small multi-story recording fixture with word onsets.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "neurotok/preprocess.hpp"
#include "neurotok/rng.hpp"
#include "neurotok/signal_io.hpp"

namespace neurotok {

struct SynthOptions {
  double sample_rate_hz = 400.0;
  double duration_s = 4.0;
  double noise_low_hz = 1.0;
  double noise_high_hz = 40.0;
  double noise_rms = 0.5;
  std::size_t num_sinusoids = 3;
  double sine_min_hz = 2.0;
  double sine_max_hz = 40.0;
  double sine_min_amplitude = 0.2;
  double sine_max_amplitude = 1.0;
};

inline std::vector<double> synth_trace(std::size_t n, const SynthOptions& o, SplitMix64& rng) {
  std::vector<double> noise(n);
  for (auto& v : noise) v = rng.normal();
  const auto f = design_butterworth_bandpass(o.noise_low_hz, o.noise_high_hz, o.sample_rate_hz, 2);
  auto x = filtfilt(f, noise);
  double ms = 0.0;
  for (double v : x) ms += v * v;
  const double scale = ms > 0.0 ? o.noise_rms / std::sqrt(ms / static_cast<double>(n)) : 0.0;
  for (auto& v : x) v *= scale;
  for (std::size_t s = 0; s < o.num_sinusoids; ++s) {
    const double freq = rng.uniform(o.sine_min_hz, o.sine_max_hz);
    const double amp = rng.uniform(o.sine_min_amplitude, o.sine_max_amplitude);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < n; ++i)
      x[i] += amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / o.sample_rate_hz + phase);
  }
  return x;
}

// `count` independent single-channel windows.
inline std::vector<std::vector<float>> synth_windows(std::size_t count, const SynthOptions& o, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(std::llround(o.duration_s * o.sample_rate_hz));
  SplitMix64 root(seed);
  std::vector<std::vector<float>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SplitMix64 rng = root.fork(i);
    const auto x = synth_trace(n, o, rng);
    out.emplace_back(x.begin(), x.end());
  }
  return out;
}

struct SynthCorpusOptions {
  std::vector<std::string> stories{"easy money", "the black willow", "lw1", "cable spool fort"};
  std::size_t channels = 2;
  double sample_rate_hz = 1000.0;
  double story_duration_s = 30.0;  // four stories: 120 s in total
  double words_per_second = 2.0;
  std::size_t vocabulary_per_story = 40;
  std::size_t speech_codes_per_word = 3;
  std::size_t speech_vocabulary = 1000;
  SynthOptions signal{};
};

struct SynthCorpus {
  std::vector<NeuralSignal> recordings;  // one per story
  std::vector<WordOnset> words;
};

namespace detail {

// Pronounceable pseudo-word; the story tag keeps vocabularies disjoint.
inline std::string pseudo_word(std::size_t story, std::size_t index) {
  static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static const char* vowels[] = {"a", "e", "i", "o", "u"};
  std::string w;
  std::size_t v = index * 7 + 3;
  for (int syl = 0; syl < 2; ++syl) {
    w += onsets[v % 14];
    v /= 14;
    w += vowels[v % 5];
    v /= 5;
  }
  w += onsets[story % 14];
  w += vowels[(story / 14) % 5];
  w += std::to_string(index % 10);
  return w;
}

}  // namespace detail

inline SynthCorpus synth_corpus(const SynthCorpusOptions& o, std::uint64_t seed) {
  SynthCorpus corpus;
  SplitMix64 root(seed);
  const auto n = static_cast<std::size_t>(std::llround(o.story_duration_s * o.sample_rate_hz));
  SynthOptions sig = o.signal;
  sig.sample_rate_hz = o.sample_rate_hz;
  for (std::size_t s = 0; s < o.stories.size(); ++s) {
    SplitMix64 rng = root.fork(s);
    NeuralSignal rec;
    rec.header.sample_rate_hz = o.sample_rate_hz;
    rec.header.num_samples = n;
    rec.header.story_id = o.stories[s];
    rec.header.subject_id = "synthetic";
    for (std::size_t c = 0; c < o.channels; ++c) rec.header.channel_names.push_back("MEG" + std::to_string(c));
    rec.samples = Matrix<float>(o.channels, n);
    for (std::size_t c = 0; c < o.channels; ++c) {
      const auto x = synth_trace(n, sig, rng);
      for (std::size_t i = 0; i < n; ++i) rec.samples(c, i) = static_cast<float>(x[i]);
    }
    corpus.recordings.push_back(std::move(rec));

    const double gap = 1.0 / o.words_per_second;
    std::size_t k = 0;
    for (double t = 0.25; t < o.story_duration_s; t += gap, ++k) {
      WordOnset w;
      w.story_id = o.stories[s];
      w.word = detail::pseudo_word(s, rng.below(o.vocabulary_per_story));
      w.onset_s = std::round(t * 1000.0) / 1000.0;
      std::vector<int> codes;
      for (std::size_t j = 0; j < o.speech_codes_per_word; ++j)
        codes.push_back(static_cast<int>(rng.below(o.speech_vocabulary)));
      w.speech_codes = std::move(codes);
      corpus.words.push_back(std::move(w));
    }
  }
  return corpus;
}

}  // namespace neurotok
