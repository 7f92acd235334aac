#pragma once

// Chat-style instruction records over three modalities (neural "eg",
// speech, text) and their JSON-lines storage.

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "neurotok/preprocess.hpp"
#include "neurotok/rng.hpp"
#include "neurotok/token_codec.hpp"

namespace neurotok {

inline constexpr std::string_view kSystemPrompt =
    "You are a helpful assistant named NeuGPT. You can understand and produce neural signals, and you can interact "
    "with speech and text modalities.";

enum class Modality { Eg, Speech, Text };

enum class PairTag { EgToText, TextToEg, EgToSpeech, SpeechToEg, SpeechToText, TextToSpeech };

inline constexpr std::array<PairTag, 6> kAllPairs{PairTag::EgToText,   PairTag::TextToEg,     PairTag::EgToSpeech,
                                                  PairTag::SpeechToEg, PairTag::SpeechToText, PairTag::TextToSpeech};

inline Modality source_of(PairTag p) {
  switch (p) {
    case PairTag::EgToText:
    case PairTag::EgToSpeech: return Modality::Eg;
    case PairTag::SpeechToEg:
    case PairTag::SpeechToText: return Modality::Speech;
    default: return Modality::Text;
  }
}

inline Modality target_of(PairTag p) {
  switch (p) {
    case PairTag::TextToEg:
    case PairTag::SpeechToEg: return Modality::Eg;
    case PairTag::EgToSpeech:
    case PairTag::TextToSpeech: return Modality::Speech;
    default: return Modality::Text;
  }
}

inline std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::Eg: return "eg";
    case Modality::Speech: return "speech";
    default: return "text";
  }
}

inline std::string pair_name(PairTag p) {
  return std::string(modality_name(source_of(p))) + "->" + std::string(modality_name(target_of(p)));
}

inline PairTag parse_pair(std::string_view s) {
  for (auto p : kAllPairs)
    if (pair_name(p) == s) return p;
  throw ValidationError("unknown modality pair '" + std::string(s) + "' (expected e.g. eg->text)");
}

struct ChatMessage {
  std::string role;  // system, user, assistant
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

struct PromptRecord {
  std::vector<ChatMessage> messages;
  PairTag pair = PairTag::EgToText;
  bool operator==(const PromptRecord&) const = default;
};

// How the user turn joins instruction, input marker and payload.
struct PromptFormat {
  std::string separator = "\n";
  std::string input_marker = "This is the input:";
};

// Marker wording used by the pretraining-style speech records.
inline PromptFormat pretraining_format() { return {" ", "This is input: "}; }

using TemplatePool = std::map<PairTag, std::vector<std::string>>;

inline const TemplatePool& default_templates() {
  static const TemplatePool pool{
      {PairTag::EgToText,
       {"Convert the following eg input to text:", "Transcribe this neural recording into text:",
        "What words does this eg segment correspond to?", "Decode the following neural signal into text:",
        "Write down the text heard during this eg recording:", "Turn this eg input into a written transcript:",
        "Read the following neural codes and give the text:", "Translate the eg signal below into words:",
        "Which sentence was the listener hearing? Use the eg input:", "Produce the text for the following eg codes:"}},
      {PairTag::TextToEg,
       {"Convert the following text input to eg:", "Generate the neural signal evoked by this text:",
        "Produce eg codes for someone listening to this text:", "Encode this sentence as a neural recording:",
        "What would the eg look like while hearing this text?", "Turn the following text into eg codes:",
        "Write the neural response to the text below:", "Synthesize eg tokens for this transcript:",
        "Map this text to neural signal codes:", "Create the eg input that matches this text:"}},
      {PairTag::EgToSpeech,
       {"Convert the following eg input to speech:", "Speak what was heard during this eg recording:",
        "Generate speech units from this neural signal:", "Turn this eg input into speech:",
        "Produce the audio units matching these neural codes:", "Say the words decoded from this eg segment:",
        "Translate the eg signal below into speech:", "Render this neural recording as speech units:",
        "What speech corresponds to this eg input?", "Reconstruct the heard speech from the eg codes:"}},
      {PairTag::SpeechToEg,
       {"Convert the following speech input to eg:", "Generate the neural response to this speech:",
        "Produce eg codes for someone hearing this speech:", "Encode this speech as a neural recording:",
        "What eg would this speech evoke?", "Turn the following speech units into eg codes:",
        "Write the neural signal for the speech below:", "Synthesize eg tokens while listening to this speech:",
        "Map these speech units to neural codes:", "Create the eg input that matches this speech:"}},
      {PairTag::SpeechToText,
       {"Convert the following speech input to text:", "Transcribe this speech:", "What is being said here?",
        "Write down the words in this speech:", "Turn these speech units into text:",
        "Recognize the speech below and give the text:", "Give a transcript of the following speech:",
        "Decode these speech units into words:", "Listen to this and write what you hear:",
        "Produce the text for the following speech:"}},
      {PairTag::TextToSpeech,
       {"Can you speak the text using an exaggerated accent?", "Convert the following text input to speech:",
        "Read this text aloud:", "Say the following sentence:", "Speak the text below:",
        "Turn this text into speech units:", "Please pronounce this text:", "Generate speech for the text below:",
        "Produce the spoken form of this text:", "Voice the following words:"}},
  };
  return pool;
}

inline TemplatePool read_template_pool(const std::filesystem::path& path) {
  TemplatePool pool;
  try {
    const auto j = nlohmann::json::parse(detail::read_text(path));
    for (const auto& [key, list] : j.items()) pool[parse_pair(key)] = list.get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": malformed template pool: " + e.what());
  }
  return pool;
}

inline PromptRecord build_prompt_with_instruction(PairTag pair, std::string_view instruction,
                                                  std::string_view source_payload, std::string_view target_payload,
                                                  const PromptFormat& format = {}) {
  PromptRecord r;
  r.pair = pair;
  r.messages.push_back({"system", std::string(kSystemPrompt)});
  std::string user(instruction);
  user += format.separator;
  user += format.input_marker;
  user += source_payload;
  r.messages.push_back({"user", std::move(user)});
  r.messages.push_back({"assistant", std::string(target_payload)});
  return r;
}

inline const std::string& pick_template(PairTag pair, std::uint64_t seed, const TemplatePool& pool) {
  auto it = pool.find(pair);
  if (it == pool.end() || it->second.empty()) throw ValidationError("no instruction templates for " + pair_name(pair));
  SplitMix64 rng(seed);
  return it->second[rng.below(it->second.size())];
}

inline PromptRecord build_prompt(PairTag pair, std::string_view source_payload, std::string_view target_payload,
                                 std::uint64_t template_seed, const TemplatePool& pool = default_templates(),
                                 const PromptFormat& format = {}) {
  return build_prompt_with_instruction(pair, pick_template(pair, template_seed, pool), source_payload,
                                       target_payload, format);
}

// ---------------------------------------------------------------------------
// Dataset assembly

struct DatasetOptions {
  std::vector<PairTag> pairs{PairTag::EgToText};
  std::uint64_t seed = 0;
  double sample_rate_hz = 400.0;
  std::size_t threads = 0;
  const TemplatePool* templates = nullptr;  // default_templates() when null
  PromptFormat format{};
};

struct DatasetSummary {
  std::size_t records = 0;
  std::map<PairTag, std::size_t> emitted;
  std::map<PairTag, std::size_t> skipped;  // window lacked a needed payload
};

inline std::vector<PromptRecord> build_dataset(const std::vector<WindowedSample>& windows,
                                               const CodecModel<float>& model, const VocabRegistry& reg,
                                               const DatasetOptions& opt, DatasetSummary* summary = nullptr) {
  if (opt.pairs.empty()) throw ValidationError("build_dataset: no modality pairs requested");
  check_codebook(model, reg);
  const auto& pool = opt.templates ? *opt.templates : default_templates();

  bool need_eg = false;
  for (auto p : opt.pairs) need_eg |= source_of(p) == Modality::Eg || target_of(p) == Modality::Eg;

  std::vector<std::string> eg(windows.size());
  if (need_eg) {
    parallel_for(windows.size(), opt.threads ? opt.threads : worker_count(), [&](std::size_t i) {
      const auto& w = windows[i];
      NeuralSignal sig;
      sig.header.sample_rate_hz = opt.sample_rate_hz;
      sig.header.num_samples = w.signal.cols();
      for (std::size_t c = 0; c < w.signal.rows(); ++c) sig.header.channel_names.push_back("ch" + std::to_string(c));
      sig.samples = w.signal;
      eg[i] = serialize_neural(tokenize_signal(sig, model, reg, 1).tokens, reg);
    });
  }

  DatasetSummary sum;
  std::vector<PromptRecord> out;
  SplitMix64 root(opt.seed);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& w = windows[i];
    std::optional<std::string> speech;
    if (w.speech_codes) speech = serialize_speech(*w.speech_codes, reg);
    auto payload = [&](Modality m) -> std::optional<std::string> {
      switch (m) {
        case Modality::Eg: return eg[i];
        case Modality::Speech: return speech;
        default: return w.transcript;
      }
    };
    for (std::size_t k = 0; k < opt.pairs.size(); ++k) {
      const auto pair = opt.pairs[k];
      const std::uint64_t template_seed = root();
      auto src = payload(source_of(pair));
      auto dst = payload(target_of(pair));
      if (!src || !dst) {
        ++sum.skipped[pair];
        continue;
      }
      out.push_back(build_prompt(pair, *src, *dst, template_seed, pool, opt.format));
      ++sum.emitted[pair];
    }
  }
  sum.records = out.size();
  if (summary) *summary = std::move(sum);
  return out;
}

// ---------------------------------------------------------------------------
// JSON lines

inline nlohmann::json record_to_json(const PromptRecord& r) {
  auto msgs = nlohmann::json::array();
  for (const auto& m : r.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  return {{"messages", std::move(msgs)}, {"pair", pair_name(r.pair)}};
}

inline PromptRecord record_from_json(const nlohmann::json& j) {
  PromptRecord r;
  for (const auto& m : j.at("messages")) {
    ChatMessage msg{m.at("role").get<std::string>(), m.at("content").get<std::string>()};
    if (msg.role != "system" && msg.role != "user" && msg.role != "assistant")
      throw ValidationError("unknown role '" + msg.role + "'");
    r.messages.push_back(std::move(msg));
  }
  r.pair = parse_pair(j.at("pair").get<std::string>());
  return r;
}

inline void write_chatml_jsonl(const std::vector<PromptRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<PromptRecord> read_chatml_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<PromptRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": malformed record: " + e.what(), line_no);
    } catch (const ValidationError& e) {
      throw ParseError(path.string() + ": " + e.what(), line_no);
    }
  }
  return out;
}

}  // namespace neurotok
