#pragma once

// Run configuration for the command-line pipeline, on-disk window sets, and
// the stage drivers the CLI calls into.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurotok/checkpoint.hpp"
#include "neurotok/codec.hpp"
#include "neurotok/preprocess.hpp"
#include "neurotok/prompt_forge.hpp"
#include "neurotok/token_codec.hpp"
#include "neurotok/trainer.hpp"

namespace neurotok {

struct PreprocessParams {
  double low_hz = 0.1;
  double high_hz = 85.0;
  double target_hz = 400.0;
  WindowParams window{};
};

struct PipelineConfig {
  std::filesystem::path signals_dir;
  std::filesystem::path annotations;  // word-onset JSON lines; optional
  std::filesystem::path output_dir = "out";
  std::uint64_t seed = 0;
  PreprocessParams preprocess{};
  SplitSpec split{};
  CodecConfig codec{};
  RegistryConfig registry{};
  std::size_t train_steps = 2000;
  std::vector<PairTag> pairs{PairTag::EgToText};

  // Every problem found, not just the first.
  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    namespace fs = std::filesystem;
    if (!signals_dir.empty() && !fs::is_directory(signals_dir))
      out.push_back("signals_dir does not exist: " + signals_dir.string());
    if (!annotations.empty() && !fs::is_regular_file(annotations))
      out.push_back("annotations file does not exist: " + annotations.string());
    if (output_dir.empty()) out.push_back("output_dir must be set");
    const auto& p = preprocess;
    if (!(p.low_hz > 0.0) || !(p.high_hz > p.low_hz))
      out.push_back("preprocess: need 0 < low_hz < high_hz");
    if (!(p.target_hz > 0.0)) out.push_back("preprocess: target_hz must be positive");
    else if (p.high_hz >= p.target_hz / 2)
      out.push_back("preprocess: high_hz must be below the target Nyquist frequency");
    if (!(p.window.window_s > 0.0)) out.push_back("preprocess: window_s must be positive");
    if (!(p.window.stride_s > 0.0)) out.push_back("preprocess: stride_s must be positive");
    if (p.window.jitter_s < 0.0) out.push_back("preprocess: jitter_s must be non-negative");
    try {
      split.validate();
    } catch (const Error& e) {
      out.push_back(std::string("split: ") + e.what());
    }
    for (const auto& s : codec.problems()) out.push_back("codec: " + s);
    if (registry.base_size == 0) out.push_back("registry: base_size must be positive");
    if (registry.neural_size != codec.codebook_size)
      out.push_back("registry: neural_codebook_size (" + std::to_string(registry.neural_size) +
                    ") must equal codec codebook_size (" + std::to_string(codec.codebook_size) + ")");
    if (train_steps == 0) out.push_back("train_steps must be positive");
    if (pairs.empty()) out.push_back("pairs must not be empty");
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid configuration (" + std::to_string(p.size()) + " problem" + (p.size() > 1 ? "s" : "") + "):";
    for (const auto& s : p) msg += "\n  - " + s;
    throw ValidationError(msg);
  }
};

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json pairs = nlohmann::json::array();
  for (auto p : c.pairs) pairs.push_back(pair_name(p));
  return {{"signals_dir", c.signals_dir.string()},
          {"annotations", c.annotations.string()},
          {"output_dir", c.output_dir.string()},
          {"seed", c.seed},
          {"preprocess",
           {{"low_hz", c.preprocess.low_hz},
            {"high_hz", c.preprocess.high_hz},
            {"target_hz", c.preprocess.target_hz},
            {"window_s", c.preprocess.window.window_s},
            {"stride_s", c.preprocess.window.stride_s},
            {"jitter_s", c.preprocess.window.jitter_s}}},
          {"split", c.split.to_json()},
          {"codec", c.codec},
          {"registry", c.registry},
          {"train_steps", c.train_steps},
          {"pairs", pairs}};
}

// Collects every problem (unknown keys, type errors) before failing.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  std::vector<std::string> problems;
  if (!j.is_object()) throw ValidationError("configuration must be a JSON object");
  static const std::vector<std::string> known = {"signals_dir", "annotations", "output_dir", "seed",
                                                 "preprocess",  "split",       "codec",      "registry",
                                                 "train_steps", "pairs"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) problems.push_back("unknown key: " + key);

  auto guard = [&](const char* what, auto&& fn) {
    try {
      fn();
    } catch (const nlohmann::json::exception& e) {
      problems.push_back(std::string(what) + ": " + e.what());
    } catch (const Error& e) {
      problems.push_back(std::string(what) + ": " + e.what());
    }
  };
  guard("signals_dir", [&] { if (j.contains("signals_dir")) c.signals_dir = j["signals_dir"].get<std::string>(); });
  guard("annotations", [&] { if (j.contains("annotations")) c.annotations = j["annotations"].get<std::string>(); });
  guard("output_dir", [&] { if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>(); });
  guard("seed", [&] { if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>(); });
  guard("preprocess", [&] {
    if (!j.contains("preprocess")) return;
    const auto& p = j["preprocess"];
    static const std::vector<std::string> pk = {"low_hz", "high_hz", "target_hz", "window_s", "stride_s", "jitter_s"};
    for (const auto& [key, _] : p.items())
      if (std::find(pk.begin(), pk.end(), key) == pk.end()) problems.push_back("preprocess: unknown key: " + key);
    c.preprocess.low_hz = p.value("low_hz", c.preprocess.low_hz);
    c.preprocess.high_hz = p.value("high_hz", c.preprocess.high_hz);
    c.preprocess.target_hz = p.value("target_hz", c.preprocess.target_hz);
    c.preprocess.window.window_s = p.value("window_s", c.preprocess.window.window_s);
    c.preprocess.window.stride_s = p.value("stride_s", c.preprocess.window.stride_s);
    c.preprocess.window.jitter_s = p.value("jitter_s", c.preprocess.window.jitter_s);
  });
  guard("split", [&] { if (j.contains("split")) c.split = SplitSpec::from_json(j["split"]); });
  guard("codec", [&] { if (j.contains("codec")) j["codec"].get_to(c.codec); });
  guard("registry", [&] { if (j.contains("registry")) j["registry"].get_to(c.registry); });
  guard("train_steps", [&] { if (j.contains("train_steps")) c.train_steps = j["train_steps"].get<std::size_t>(); });
  guard("pairs", [&] {
    if (!j.contains("pairs")) return;
    c.pairs.clear();
    for (const auto& p : j["pairs"]) c.pairs.push_back(parse_pair(p.get<std::string>()));
  });
  if (!problems.empty()) {
    std::string msg = "invalid configuration (" + std::to_string(problems.size()) + " problem" +
                      (problems.size() > 1 ? "s" : "") + "):";
    for (const auto& s : problems) msg += "\n  - " + s;
    throw ValidationError(msg);
  }
  return c;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return pipeline_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Window sets: `<name>.jsonl` (one metadata line per window) next to
// `<name>.f32` (the [C, W] blocks, back to back, little-endian).

inline void write_windows(const std::vector<WindowedSample>& windows, const std::filesystem::path& stem) {
  std::vector<unsigned char> payload;
  std::string meta;
  std::size_t offset = 0;
  for (const auto& w : windows) {
    nlohmann::json j{{"story_id", w.story_id},
                     {"start_time_s", w.start_time_s},
                     {"channels", w.signal.rows()},
                     {"samples", w.signal.cols()},
                     {"offset", offset}};
    if (w.transcript) j["transcript"] = *w.transcript;
    if (w.speech_codes) j["speech_codes"] = *w.speech_codes;
    meta += j.dump() + "\n";
    for (float v : w.signal.data()) detail::put_f32_le(payload, v);
    offset += w.signal.size();
  }
  detail::write_text(detail::with_suffix(stem, ".jsonl"), meta);
  detail::write_bytes(detail::with_suffix(stem, ".f32"), payload.data(), payload.size());
}

inline std::vector<WindowedSample> read_windows(const std::filesystem::path& stem) {
  const auto meta_path = detail::with_suffix(stem, ".jsonl");
  const auto bytes = detail::read_bytes(detail::with_suffix(stem, ".f32"));
  std::ifstream in(meta_path);
  if (!in) throw IoError("cannot open " + meta_path.string());
  std::vector<WindowedSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      WindowedSample w;
      w.story_id = j.at("story_id").get<std::string>();
      w.start_time_s = j.at("start_time_s").get<double>();
      const auto C = j.at("channels").get<std::size_t>(), W = j.at("samples").get<std::size_t>();
      const auto off = j.at("offset").get<std::size_t>();
      if ((off + C * W) * 4 > bytes.size()) throw ValidationError("window data extends past the payload");
      std::vector<float> v(C * W);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::get_f32_le(bytes.data() + 4 * (off + i));
      w.signal = Matrix<float>(C, W, std::move(v));
      if (j.contains("transcript")) w.transcript = j["transcript"].get<std::string>();
      if (j.contains("speech_codes")) w.speech_codes = j["speech_codes"].get<std::vector<int>>();
      out.push_back(std::move(w));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(meta_path.string() + ": malformed window line: " + e.what(), line_no);
    } catch (const ValidationError& e) {
      throw ParseError(meta_path.string() + ": " + e.what(), line_no);
    }
  }
  return out;
}

// Every channel of every window as its own single-channel training sample.
inline std::vector<std::vector<float>> pool_channels(const std::vector<WindowedSample>& windows) {
  std::vector<std::vector<float>> out;
  for (const auto& w : windows)
    for (std::size_t c = 0; c < w.signal.rows(); ++c) {
      const auto r = w.signal.row(c);
      out.emplace_back(r.begin(), r.end());
    }
  return out;
}

// ---------------------------------------------------------------------------
// Stage drivers. Output layout under output_dir:
//   windows/{train,val,test}.{jsonl,f32}, windows/manifest.json
//   codec.ckpt, loss.csv
//   dataset/{train,val,test}.jsonl, vocab.json

inline std::string file_safe(const std::string& s) {
  std::string out;
  for (char ch : s) out.push_back(std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_');
  return out.empty() ? "unnamed" : out;
}

inline std::vector<std::filesystem::path> list_signals(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json" &&
        std::filesystem::exists(detail::with_suffix(detail::signal_stem(e.path()), ".f32")))
      out.push_back(detail::signal_stem(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

struct PreprocessSummary {
  std::size_t recordings = 0;
  std::size_t train = 0, val = 0, test = 0;
  OverlapAudit audit;
};

inline PreprocessSummary run_preprocess(const PipelineConfig& cfg) {
  if (cfg.signals_dir.empty()) throw ValidationError("preprocess needs signals_dir");
  const auto files = list_signals(cfg.signals_dir);
  if (files.empty()) throw ValidationError("no signal files in " + cfg.signals_dir.string());
  std::vector<WordOnset> words;
  if (!cfg.annotations.empty()) words = read_word_onsets(cfg.annotations);

  std::vector<WindowedSample> all;
  for (const auto& f : files) {
    auto sig = read_signal(f);
    if (!sig.header.story_id) sig.header.story_id = f.filename().string();
    sig = resample(bandpass(sig, cfg.preprocess.low_hz, cfg.preprocess.high_hz), cfg.preprocess.target_hz);
    auto ws = extract_windows(sig, cfg.preprocess.window, cfg.seed);
    all.insert(all.end(), std::make_move_iterator(ws.begin()), std::make_move_iterator(ws.end()));
  }
  attach_annotations(all, words, cfg.preprocess.window.window_s);
  const auto split = split_dataset(std::move(all), cfg.split);

  const auto dir = cfg.output_dir / "windows";
  std::filesystem::create_directories(dir);
  write_windows(split.train, dir / "train");
  write_windows(split.val, dir / "val");
  write_windows(split.test, dir / "test");

  PreprocessSummary s{files.size(), split.train.size(), split.val.size(), split.test.size(), split.audit};
  const nlohmann::json manifest{{"recordings", s.recordings},
                                {"sample_rate_hz", cfg.preprocess.target_hz},
                                {"windows", {{"train", s.train}, {"val", s.val}, {"test", s.test}}},
                                {"overlap", {{"sentences", s.audit.shared_sentences}, {"words", s.audit.shared_words}}},
                                {"config", to_json(cfg)}};
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return s;
}

inline TrainResult run_train_codec(const PipelineConfig& cfg, const TrainOptions& base = {}) {
  const auto windows = read_windows(cfg.output_dir / "windows" / "train");
  if (windows.empty()) throw ValidationError("no training windows; run preprocess first");
  CodecModel<float> model(cfg.codec, cfg.seed);
  TrainOptions opt = base;
  opt.steps = cfg.train_steps;
  opt.seed = cfg.seed;
  opt.loss_csv = cfg.output_dir / "loss.csv";
  auto result = train_codec(model, pool_channels(windows), opt);
  save_checkpoint(model.to_checkpoint(), cfg.output_dir / "codec.ckpt");
  return result;
}

inline CodecModel<float> load_codec(const std::filesystem::path& path) {
  return CodecModel<float>::from_checkpoint(load_checkpoint(path));
}

// Token text plus a `.json` sidecar with the source header and padding.
inline void write_tokens(const TokenizedSignal& t, const VocabRegistry& reg, const std::filesystem::path& path) {
  detail::write_text(path, serialize_neural(t.tokens, reg) + "\n");
  const nlohmann::json side{{"header", header_to_json(t.header)}, {"pad", t.pad}};
  detail::write_text(detail::with_suffix(path, ".json"), side.dump(2) + "\n");
}

inline TokenizedSignal read_tokens(const VocabRegistry& reg, const std::filesystem::path& path) {
  TokenizedSignal t;
  try {
    const auto side = nlohmann::json::parse(detail::read_text(detail::with_suffix(path, ".json")));
    t.header = header_from_json(side.at("header"));
    t.pad = side.at("pad").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ".json: malformed token sidecar: " + e.what());
  }
  auto text = detail::read_text(path);
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r' || text.back() == ' ')) text.pop_back();
  t.tokens = parse_neural(text, reg, t.header.channel_names);
  return t;
}

struct BuildSummary {
  std::map<std::string, DatasetSummary> per_split;
};

inline BuildSummary run_build_dataset(const PipelineConfig& cfg, const CodecModel<float>& model) {
  const VocabRegistry reg(cfg.registry);
  const auto out_dir = cfg.output_dir / "dataset";
  std::filesystem::create_directories(out_dir);
  reg.write(out_dir / "vocab.json");
  BuildSummary summary;
  for (const char* name : {"train", "val", "test"}) {
    const auto windows = read_windows(cfg.output_dir / "windows" / name);
    DatasetOptions opt;
    opt.pairs = cfg.pairs;
    opt.seed = cfg.seed ^ fnv1a64(name);
    opt.sample_rate_hz = cfg.preprocess.target_hz;
    DatasetSummary ds;
    const auto records = build_dataset(windows, model, reg, opt, &ds);
    write_chatml_jsonl(records, out_dir / (std::string(name) + ".jsonl"));
    summary.per_split[name] = std::move(ds);
  }
  return summary;
}

}  // namespace neurotok
