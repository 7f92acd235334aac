#pragma once

// Text surface forms for neural and speech code streams, and the vocabulary
// extension that gives every surface symbol an id after the base vocabulary.
//
//   neural: <soeg> { <nts> <EGc1> ... <EGcC> }*T <eoeg>
//   speech: <sosp> { <j> }* <eosp>

#include <array>
#include <charconv>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "neurotok/codec.hpp"
#include "neurotok/error.hpp"
#include "neurotok/matrix.hpp"
#include "neurotok/parallel.hpp"
#include "neurotok/signal_io.hpp"

namespace neurotok {

inline constexpr std::string_view kSoeg = "<soeg>";
inline constexpr std::string_view kEoeg = "<eoeg>";
inline constexpr std::string_view kNts = "<nts>";
inline constexpr std::string_view kSosp = "<sosp>";
inline constexpr std::string_view kEosp = "<eosp>";
inline constexpr std::array<std::string_view, 5> kSpecialSymbols{kSoeg, kEoeg, kNts, kSosp, kEosp};

inline std::string neural_symbol(std::size_t code) { return "<EG" + std::to_string(code) + ">"; }
inline std::string speech_symbol(std::size_t code) { return "<" + std::to_string(code) + ">"; }

struct RegistryConfig {
  std::size_t base_size = 151936;
  std::size_t speech_size = 1000;
  std::size_t neural_size = 8192;

  bool operator==(const RegistryConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const RegistryConfig& c) {
  j = {{"base_size", c.base_size}, {"speech_codebook_size", c.speech_size}, {"neural_codebook_size", c.neural_size}};
}

inline void from_json(const nlohmann::json& j, RegistryConfig& c) {
  for (const auto& [key, _] : j.items())
    if (key != "base_size" && key != "speech_codebook_size" && key != "neural_codebook_size")
      throw ValidationError("unknown registry key: " + key);
  c.base_size = j.value("base_size", c.base_size);
  c.speech_size = j.value("speech_codebook_size", c.speech_size);
  c.neural_size = j.value("neural_codebook_size", c.neural_size);
}

// Extension ids: specials, then speech codes, then neural codes, all
// contiguous from base_size.
class VocabRegistry {
 public:
  explicit VocabRegistry(const RegistryConfig& cfg = {}) : cfg_(cfg) {
    if (cfg.base_size == 0) throw ValidationError("base vocabulary size must be positive");
    symbols_.reserve(kSpecialSymbols.size() + cfg.speech_size + cfg.neural_size);
    for (auto s : kSpecialSymbols) symbols_.emplace_back(s);
    for (std::size_t j = 0; j < cfg.speech_size; ++j) symbols_.push_back(speech_symbol(j));
    for (std::size_t i = 0; i < cfg.neural_size; ++i) symbols_.push_back(neural_symbol(i));
    ids_.reserve(symbols_.size());
    for (std::size_t k = 0; k < symbols_.size(); ++k)
      if (!ids_.emplace(symbols_[k], cfg.base_size + k).second)
        throw ValidationError("duplicate vocabulary symbol " + symbols_[k]);
  }

  const RegistryConfig& config() const noexcept { return cfg_; }
  std::size_t base_size() const noexcept { return cfg_.base_size; }
  std::size_t speech_size() const noexcept { return cfg_.speech_size; }
  std::size_t neural_size() const noexcept { return cfg_.neural_size; }
  std::size_t extension_count() const noexcept { return symbols_.size(); }
  std::size_t total_size() const noexcept { return cfg_.base_size + symbols_.size(); }

  std::optional<std::size_t> id_of(std::string_view symbol) const {
    auto it = ids_.find(std::string(symbol));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& symbol_of(std::size_t id) const {
    if (id < cfg_.base_size || id >= total_size())
      throw ValidationError("id " + std::to_string(id) + " is not an extension id");
    return symbols_[id - cfg_.base_size];
  }

  std::size_t speech_id(std::size_t code) const { return cfg_.base_size + kSpecialSymbols.size() + code; }
  std::size_t neural_id(std::size_t code) const {
    return cfg_.base_size + kSpecialSymbols.size() + cfg_.speech_size + code;
  }

  nlohmann::json to_json() const {
    auto arr = nlohmann::json::array();
    for (std::size_t k = 0; k < symbols_.size(); ++k)
      arr.push_back({{"symbol", symbols_[k]}, {"id", cfg_.base_size + k}});
    return arr;
  }

  void write(const std::filesystem::path& path) const { detail::write_text(path, to_json().dump(1) + "\n"); }

 private:
  RegistryConfig cfg_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, std::size_t> ids_;
};

inline VocabRegistry extend_vocabulary(std::size_t base_size, RegistryConfig cfg = {}) {
  cfg.base_size = base_size;
  return VocabRegistry(cfg);
}

// Codes [T_E, C] tied per time step in channel order.
struct NeuralTokenSequence {
  std::vector<std::string> channel_names;
  Matrix<int> codes;

  std::size_t steps() const noexcept { return codes.rows(); }
  std::size_t channels() const noexcept { return channel_names.size(); }
  bool operator==(const NeuralTokenSequence&) const = default;
};

namespace detail {

struct Symbol {
  std::string_view text;  // including the angle brackets
  std::size_t pos;
};

class SymbolLexer {
 public:
  explicit SymbolLexer(std::string_view s) : s_(s) {}

  std::optional<Symbol> next() {
    if (i_ >= s_.size()) return std::nullopt;
    if (s_[i_] != '<') throw ParseError("expected '<'", i_);
    const auto close = s_.find('>', i_ + 1);
    if (close == std::string_view::npos) throw ParseError("unterminated symbol", i_);
    Symbol sym{s_.substr(i_, close - i_ + 1), i_};
    i_ = close + 1;
    return sym;
  }

  std::size_t pos() const noexcept { return i_; }

 private:
  std::string_view s_;
  std::size_t i_ = 0;
};

// Canonical decimal (no sign, no leading zeros).
inline std::optional<std::size_t> parse_index(std::string_view digits) {
  if (digits.empty() || (digits.size() > 1 && digits[0] == '0')) return std::nullopt;
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
  if (ec != std::errc{} || p != digits.data() + digits.size()) return std::nullopt;
  return v;
}

inline std::optional<std::size_t> neural_code(std::string_view sym) {
  if (sym.size() < 5 || sym.substr(0, 3) != "<EG") return std::nullopt;
  return parse_index(sym.substr(3, sym.size() - 4));
}

inline std::optional<std::size_t> speech_code(std::string_view sym) {
  if (sym.size() < 3) return std::nullopt;
  return parse_index(sym.substr(1, sym.size() - 2));
}

inline bool is_special(std::string_view sym) {
  for (auto s : kSpecialSymbols)
    if (s == sym) return true;
  return false;
}

}  // namespace detail

inline std::string serialize_neural(const NeuralTokenSequence& seq, std::size_t codebook_size) {
  if (seq.codes.cols() != seq.channels() && seq.steps() > 0)
    throw ShapeError("code matrix has " + std::to_string(seq.codes.cols()) + " columns for " +
                     std::to_string(seq.channels()) + " channels");
  std::string out(kSoeg);
  for (std::size_t t = 0; t < seq.steps(); ++t) {
    out += kNts;
    for (std::size_t c = 0; c < seq.codes.cols(); ++c) {
      const int k = seq.codes(t, c);
      if (k < 0 || static_cast<std::size_t>(k) >= codebook_size)
        throw ValidationError("neural code " + std::to_string(k) + " at step " + std::to_string(t) +
                              " is outside [0, " + std::to_string(codebook_size) + ")");
      out += neural_symbol(static_cast<std::size_t>(k));
    }
  }
  out += kEoeg;
  return out;
}

inline std::string serialize_neural(const NeuralTokenSequence& seq, const VocabRegistry& reg) {
  return serialize_neural(seq, reg.neural_size());
}

// Channel names are taken from `channel_names` when given (and the count is
// enforced against them), otherwise generated as "0", "1", ...
inline NeuralTokenSequence parse_neural(std::string_view text, const VocabRegistry& reg,
                                        const std::vector<std::string>& channel_names = {}) {
  detail::SymbolLexer lex(text);
  auto first = lex.next();
  if (!first || first->text != kSoeg) throw ParseError("neural stream must start with <soeg>", 0);

  std::vector<std::vector<int>> steps;
  std::optional<std::size_t> width = channel_names.empty() ? std::nullopt : std::optional(channel_names.size());
  bool closed = false;
  auto finish_step = [&](std::size_t at) {
    if (steps.empty()) return;
    const std::size_t n = steps.back().size();
    if (!width) width = n;
    if (n != *width)
      throw ParseError("time step has " + std::to_string(n) + " channels, expected " + std::to_string(*width), at);
  };
  while (auto sym = lex.next()) {
    if (closed) throw ParseError("symbols after <eoeg>", sym->pos);
    if (sym->text == kNts) {
      finish_step(sym->pos);
      steps.emplace_back();
    } else if (sym->text == kEoeg) {
      finish_step(sym->pos);
      closed = true;
    } else if (auto code = detail::neural_code(sym->text)) {
      if (steps.empty()) throw ParseError("neural code before the first <nts>", sym->pos);
      if (*code >= reg.neural_size())
        throw ParseError("neural code " + std::to_string(*code) + " is outside the codebook of size " +
                             std::to_string(reg.neural_size()),
                         sym->pos);
      if (width && steps.back().size() == *width)
        throw ParseError("time step has more than " + std::to_string(*width) + " channels", sym->pos);
      steps.back().push_back(static_cast<int>(*code));
    } else if (detail::is_special(sym->text)) {
      throw ParseError("unexpected " + std::string(sym->text) + " in neural stream", sym->pos);
    } else {
      throw ParseError("unknown symbol " + std::string(sym->text), sym->pos);
    }
  }
  if (!closed) throw ParseError("neural stream is missing <eoeg>", text.size());

  NeuralTokenSequence seq;
  const std::size_t C = width.value_or(0);
  if (!channel_names.empty()) {
    seq.channel_names = channel_names;
  } else {
    for (std::size_t c = 0; c < C; ++c) seq.channel_names.push_back(std::to_string(c));
  }
  seq.codes = Matrix<int>(steps.size(), C);
  for (std::size_t t = 0; t < steps.size(); ++t)
    for (std::size_t c = 0; c < C; ++c) seq.codes(t, c) = steps[t][c];
  return seq;
}

inline std::string serialize_speech(std::span<const int> codes, std::size_t codebook_size) {
  std::string out(kSosp);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] < 0 || static_cast<std::size_t>(codes[i]) >= codebook_size)
      throw ValidationError("speech code " + std::to_string(codes[i]) + " at index " + std::to_string(i) +
                            " is outside [0, " + std::to_string(codebook_size) + ")");
    out += speech_symbol(static_cast<std::size_t>(codes[i]));
  }
  out += kEosp;
  return out;
}

inline std::string serialize_speech(std::span<const int> codes, const VocabRegistry& reg) {
  return serialize_speech(codes, reg.speech_size());
}

inline std::vector<int> parse_speech(std::string_view text, const VocabRegistry& reg) {
  detail::SymbolLexer lex(text);
  auto first = lex.next();
  if (!first || first->text != kSosp) throw ParseError("speech stream must start with <sosp>", 0);
  std::vector<int> codes;
  bool closed = false;
  while (auto sym = lex.next()) {
    if (closed) throw ParseError("symbols after <eosp>", sym->pos);
    if (sym->text == kEosp) {
      closed = true;
    } else if (detail::is_special(sym->text)) {
      throw ParseError("unexpected " + std::string(sym->text) + " in speech stream", sym->pos);
    } else if (auto code = detail::speech_code(sym->text)) {
      if (*code >= reg.speech_size())
        throw ParseError("speech code " + std::to_string(*code) + " is outside the codebook of size " +
                             std::to_string(reg.speech_size()),
                         sym->pos);
      codes.push_back(static_cast<int>(*code));
    } else {
      throw ParseError("unknown symbol " + std::string(sym->text), sym->pos);
    }
  }
  if (!closed) throw ParseError("speech stream is missing <eosp>", text.size());
  return codes;
}

// ---------------------------------------------------------------------------
// Signals <-> token sequences through a trained codec (first RVQ stage only).

struct TokenizedSignal {
  NeuralTokenSequence tokens;
  SignalHeader header;  // of the source signal
  std::size_t pad = 0;  // zeros appended per channel before encoding
};

inline void check_codebook(const CodecModel<float>& model, const VocabRegistry& reg) {
  if (model.config().codebook_size != reg.neural_size())
    throw ValidationError("checkpoint codebook size " + std::to_string(model.config().codebook_size) +
                          " does not match registry neural size " + std::to_string(reg.neural_size()));
}

inline TokenizedSignal tokenize_signal(const NeuralSignal& x, const CodecModel<float>& model,
                                       const VocabRegistry& reg, std::size_t threads = 0) {
  check_codebook(model, reg);
  x.validate();
  const std::size_t C = x.samples.rows();
  std::vector<Matrix<int>> per_channel(C);
  std::vector<std::size_t> pads(C);
  parallel_for(C, threads ? threads : worker_count(), [&](std::size_t c) {
    const auto row = x.samples.row(c);
    std::vector<float> v(row.begin(), row.end());
    pads[c] = pad_to_multiple(v, model.config().downsample_factor);
    per_channel[c] = encode_codes<float>(model, v);
  });
  TokenizedSignal out;
  out.header = x.header;
  out.pad = C ? pads[0] : 0;
  out.tokens.channel_names = x.header.channel_names;
  const std::size_t TE = C ? per_channel[0].cols() : 0;
  out.tokens.codes = Matrix<int>(TE, C);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < TE; ++t) out.tokens.codes(t, c) = per_channel[c](0, t);
  return out;
}

// Header fields come from `header`; samples beyond num_samples (the recorded
// padding) are dropped.
inline NeuralSignal detokenize_signal(const NeuralTokenSequence& seq, const SignalHeader& header,
                                      const CodecModel<float>& model, const VocabRegistry& reg,
                                      std::size_t threads = 0) {
  check_codebook(model, reg);
  const std::size_t C = seq.channels(), TE = seq.steps();
  if (C != header.num_channels())
    throw ShapeError("token sequence has " + std::to_string(C) + " channels, header has " +
                     std::to_string(header.num_channels()));
  const std::size_t decoded = TE * model.config().downsample_factor;
  if (header.num_samples > decoded)
    throw ShapeError("header expects " + std::to_string(header.num_samples) + " samples but the tokens decode to " +
                     std::to_string(decoded));
  NeuralSignal out;
  out.header = header;
  out.header.channel_names = seq.channel_names;
  out.samples = Matrix<float>(C, header.num_samples);
  parallel_for(C, threads ? threads : worker_count(), [&](std::size_t c) {
    Matrix<int> codes(1, TE);
    for (std::size_t t = 0; t < TE; ++t) codes(0, t) = seq.codes(t, c);
    const auto y = decode_codes<float>(model, codes);
    std::copy(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(header.num_samples), out.samples.row(c).begin());
  });
  return out;
}

}  // namespace neurotok
