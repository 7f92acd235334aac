#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "neurotok/synth.hpp"
#include "neurotok/token_codec.hpp"

using namespace neurotok;

namespace {

NeuralTokenSequence make_seq(std::vector<std::vector<int>> rows) {
  NeuralTokenSequence s;
  const std::size_t C = rows.empty() ? 0 : rows[0].size();
  for (std::size_t c = 0; c < C; ++c) s.channel_names.push_back(std::to_string(c));
  s.codes = Matrix<int>(rows.size(), C);
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t c = 0; c < C; ++c) s.codes(t, c) = rows[t][c];
  return s;
}

NeuralTokenSequence random_seq(SplitMix64& rng, std::size_t V) {
  const std::size_t C = 1 + rng.below(8), T = rng.below(65);
  NeuralTokenSequence s;
  for (std::size_t c = 0; c < C; ++c) s.channel_names.push_back("MEG" + std::to_string(c));
  s.codes = Matrix<int>(T, C);
  for (auto& v : s.codes.data()) v = static_cast<int>(rng.below(V));
  return s;
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

CodecConfig tiny_codec(std::size_t V) {
  CodecConfig cfg;
  cfg.base_channels = 2;
  cfg.embed_dim = 4;
  cfg.codebook_size = V;
  cfg.n_q = 2;
  return cfg;
}

}  // namespace

TEST(Registry, DefaultLayout) {
  const auto reg = extend_vocabulary(151936);
  EXPECT_EQ(reg.total_size(), 161133u);
  EXPECT_EQ(reg.id_of("<soeg>"), 151936u);
  EXPECT_EQ(reg.id_of("<eoeg>"), 151937u);
  EXPECT_EQ(reg.id_of("<nts>"), 151938u);
  EXPECT_EQ(reg.id_of("<sosp>"), 151939u);
  EXPECT_EQ(reg.id_of("<eosp>"), 151940u);
  EXPECT_EQ(reg.id_of("<0>"), 151941u);
  EXPECT_EQ(reg.id_of("<999>"), 152940u);
  EXPECT_EQ(reg.id_of("<EG0>"), 152941u);
  EXPECT_EQ(reg.id_of("<EG8191>"), 161132u);
  EXPECT_EQ(reg.speech_id(334), *reg.id_of("<334>"));
  EXPECT_EQ(reg.neural_id(5792), *reg.id_of("<EG5792>"));
  EXPECT_FALSE(reg.id_of("<EG8192>"));
  EXPECT_FALSE(reg.id_of("<1000>"));
  EXPECT_FALSE(reg.id_of("<EG01>"));
}

TEST(Registry, SymbolIdBijection) {
  const auto reg = extend_vocabulary(151936);
  for (std::size_t id = reg.base_size(); id < reg.total_size(); ++id) ASSERT_EQ(reg.id_of(reg.symbol_of(id)), id);
  EXPECT_THROW(reg.symbol_of(reg.base_size() - 1), ValidationError);
  EXPECT_THROW(reg.symbol_of(reg.total_size()), ValidationError);
}

TEST(Registry, NoNeuralCodes) {
  const auto reg = extend_vocabulary(100, {0, 1000, 0});
  EXPECT_EQ(reg.total_size(), 100u + 5 + 1000);
  EXPECT_EQ(reg.id_of("<EG0>"), std::nullopt);
  EXPECT_THROW(extend_vocabulary(0), ValidationError);
}

TEST(Registry, JsonListsEveryExtension) {
  const auto reg = extend_vocabulary(10, {0, 3, 2});
  const auto j = reg.to_json();
  ASSERT_EQ(j.size(), 10u);
  EXPECT_EQ(j[0]["symbol"], "<soeg>");
  EXPECT_EQ(j[0]["id"], 10);
  EXPECT_EQ(j[9]["symbol"], "<EG1>");
  EXPECT_EQ(j[9]["id"], 19);
}

TEST(NeuralFormat, Examples) {
  const VocabRegistry reg;
  EXPECT_EQ(serialize_neural(make_seq({{5, 7}}), reg), "<soeg><nts><EG5><EG7><eoeg>");
  EXPECT_EQ(serialize_neural(make_seq({{5792}, {7851}}), reg), "<soeg><nts><EG5792><nts><EG7851><eoeg>");
  EXPECT_EQ(serialize_neural(make_seq({}), reg), "<soeg><eoeg>");
}

TEST(NeuralFormat, PaperSurfaceFormChannelTied) {
  // Thirteen channels at one time step give the many-codes-per-<nts> form.
  const VocabRegistry reg;
  const auto s = make_seq({{5792, 7851, 7851, 7851, 7851, 8128, 7386, 5857, 7343, 7598, 7851, 3241, 3663}});
  EXPECT_EQ(serialize_neural(s, reg),
            "<soeg><nts><EG5792><EG7851><EG7851><EG7851><EG7851><EG8128><EG7386><EG5857><EG7343><EG7598><EG7851>"
            "<EG3241><EG3663><eoeg>");
}

TEST(NeuralFormat, SerializeRejectsOutOfRange) {
  const VocabRegistry reg;
  EXPECT_THROW(serialize_neural(make_seq({{8192}}), reg), ValidationError);
  EXPECT_THROW(serialize_neural(make_seq({{-1}}), reg), ValidationError);
}

TEST(NeuralFormat, ParseErrors) {
  const VocabRegistry reg;
  try {
    parse_neural("<soeg><nts><EG1><nts><EG2><EG3><eoeg>", reg);
    FAIL() << "expected inconsistent channel count";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 26u);  // the surplus <EG3>
  }
  try {
    parse_neural("<soeg><nts><EG8192><eoeg>", reg);
    FAIL() << "expected out-of-range code";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 11u);
  }
  EXPECT_THROW(parse_neural("<nts><EG1><eoeg>", reg), ParseError);
  EXPECT_THROW(parse_neural("<soeg><nts><EG1>", reg), ParseError);
  EXPECT_THROW(parse_neural("<soeg><nts><EG1><EG2><nts><EG3><eoeg>", reg), ParseError);
  EXPECT_THROW(parse_neural("<soeg><EG1><eoeg>", reg), ParseError);
  EXPECT_THROW(parse_neural("<soeg><nts><foo><eoeg>", reg), ParseError);
  EXPECT_THROW(parse_neural("<soeg><nts><EG01><eoeg>", reg), ParseError);
  EXPECT_THROW(parse_neural("<soeg><nts><EG1><eoeg><nts>", reg), ParseError);
  EXPECT_THROW(parse_neural("<soeg> <nts><EG1><eoeg>", reg), ParseError);
  EXPECT_THROW(parse_neural("<soeg><nts><EG1<eoeg>", reg), ParseError);
  EXPECT_THROW(parse_neural("<soeg><nts><334><eoeg>", reg), ParseError);
  EXPECT_THROW(parse_neural("", reg), ParseError);
}

TEST(NeuralFormat, ParseEnforcesGivenChannelNames) {
  const VocabRegistry reg;
  const std::vector<std::string> names{"a", "b"};
  const auto s = parse_neural("<soeg><nts><EG1><EG2><eoeg>", reg, names);
  EXPECT_EQ(s.channel_names, names);
  EXPECT_THROW(parse_neural("<soeg><nts><EG1><eoeg>", reg, names), ParseError);
  const auto empty = parse_neural("<soeg><eoeg>", reg, names);
  EXPECT_EQ(empty.steps(), 0u);
  EXPECT_EQ(empty.codes.cols(), 2u);
}

TEST(NeuralFormat, RoundTripProperty) {
  const VocabRegistry reg;
  SplitMix64 rng(2024);
  for (int i = 0; i < 10000; ++i) {
    const auto s = random_seq(rng, reg.neural_size());
    const auto text = serialize_neural(s, reg);
    ASSERT_EQ(count(text, "<nts>"), s.steps());
    ASSERT_EQ(count(text, "<EG"), s.steps() * s.channels());
    ASSERT_EQ(text.find(' '), std::string::npos);
    const auto back = parse_neural(text, reg, s.channel_names);
    ASSERT_EQ(back, s) << text;
    ASSERT_EQ(serialize_neural(back, reg), text);
  }
}

TEST(NeuralFormat, ParsingIsTotal) {
  // Random corruptions either parse or raise ParseError, never anything else.
  const VocabRegistry reg;
  SplitMix64 rng(5);
  const std::string alphabet = "<>EGntsoe0123456789 ";
  for (int i = 0; i < 3000; ++i) {
    auto text = serialize_neural(random_seq(rng, reg.neural_size()), reg);
    const std::size_t edits = 1 + rng.below(3);
    for (std::size_t e = 0; e < edits; ++e) {
      const std::size_t pos = rng.below(text.size());
      switch (rng.below(3)) {
        case 0: text.erase(pos, 1); break;
        case 1: text.insert(pos, 1, alphabet[rng.below(alphabet.size())]); break;
        default: text[pos] = alphabet[rng.below(alphabet.size())];
      }
    }
    try {
      const auto s = parse_neural(text, reg);
      EXPECT_EQ(serialize_neural(s, reg), text);
    } catch (const ParseError& e) {
      EXPECT_LE(e.position(), text.size());
    }
  }
}

TEST(SpeechFormat, Examples) {
  const VocabRegistry reg;
  const std::vector<int> codes{334, 77, 332, 334};
  EXPECT_EQ(serialize_speech(codes, reg), "<sosp><334><77><332><334><eosp>");
  EXPECT_EQ(parse_speech("<sosp><334><77><332><334><eosp>", reg), codes);
  EXPECT_EQ(serialize_speech(std::vector<int>{}, reg), "<sosp><eosp>");
  EXPECT_THROW(parse_speech("<sosp><sosp>", reg), ParseError);
  EXPECT_THROW(parse_speech("<sosp><1000><eosp>", reg), ParseError);
  EXPECT_THROW(parse_speech("<sosp><EG1><eosp>", reg), ParseError);
  EXPECT_THROW(parse_speech("<sosp><1>", reg), ParseError);
  EXPECT_THROW(parse_speech("<1><eosp>", reg), ParseError);
  EXPECT_THROW(serialize_speech(std::vector<int>{1000}, reg), ValidationError);
}

TEST(SpeechFormat, RoundTripProperty) {
  const VocabRegistry reg;
  SplitMix64 rng(77);
  for (int i = 0; i < 10000; ++i) {
    std::vector<int> codes(rng.below(64));
    for (auto& c : codes) c = static_cast<int>(rng.below(reg.speech_size()));
    ASSERT_EQ(parse_speech(serialize_speech(codes, reg), reg), codes);
  }
}

TEST(SignalTokens, ShapeAndDirectQuantizerAgreement) {
  const auto cfg = tiny_codec(16);
  const CodecModel<float> model(cfg, 3);
  const VocabRegistry reg({151936, 1000, 16});
  SynthCorpusOptions so;
  so.stories = {"s"};
  so.channels = 3;
  so.sample_rate_hz = 400.0;
  so.story_duration_s = 2.55;  // 1020 samples: padded to 1100
  const auto sig = synth_corpus(so, 9).recordings[0];

  const auto t = tokenize_signal(sig, model, reg);
  EXPECT_EQ(t.pad, 80u);
  EXPECT_EQ(t.tokens.steps(), 11u);
  EXPECT_EQ(t.tokens.channel_names, sig.header.channel_names);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto row = sig.samples.row(c);
    std::vector<float> x(row.begin(), row.end());
    pad_to_multiple(x, 100);
    const auto direct = encode_codes<float>(model, x);
    for (std::size_t s = 0; s < t.tokens.steps(); ++s) EXPECT_EQ(t.tokens.codes(s, c), direct(0, s));
  }

  const auto back = detokenize_signal(t.tokens, t.header, model, reg);
  EXPECT_EQ(back.samples.rows(), sig.samples.rows());
  EXPECT_EQ(back.samples.cols(), sig.samples.cols());
  EXPECT_EQ(back.header, sig.header);

  // Through text and back as well.
  const auto parsed = parse_neural(serialize_neural(t.tokens, reg), reg, t.header.channel_names);
  EXPECT_EQ(parsed, t.tokens);
}

TEST(SignalTokens, CodebookMismatch) {
  const CodecModel<float> model(tiny_codec(16), 1);
  const VocabRegistry reg({151936, 1000, 32});
  NeuralSignal sig;
  sig.header = {400.0, {"a"}, 200};
  sig.samples = Matrix<float>(1, 200);
  EXPECT_THROW(tokenize_signal(sig, model, reg), ValidationError);
}
