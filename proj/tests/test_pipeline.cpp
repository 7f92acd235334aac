#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "neurotok/pipeline.hpp"
#include "neurotok/synth.hpp"
#include "test_util.hpp"

using namespace neurotok;
using neurotok::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(NEUROTOK_CLI) + " " + args + " 2>&1";
  RunResult r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

CodecConfig tiny_codec() {
  CodecConfig c;
  c.base_channels = 2;
  c.embed_dim = 4;
  c.codebook_size = 16;
  c.n_q = 2;
  c.batch_size = 4;
  c.disc_count = 1;
  c.disc_layers = 2;
  c.disc_channels = 2;
  c.learning_rate = 1e-3;
  return c;
}

// Synthetic corpus plus a config pointing at it.
PipelineConfig small_run(const TempDir& dir, const std::string& out = "out") {
  SynthCorpusOptions o;
  o.story_duration_s = 12.0;
  o.sample_rate_hz = 500.0;
  const auto corpus = synth_corpus(o, 4);
  fs::create_directories(dir / "signals");
  for (const auto& rec : corpus.recordings) write_signal(rec, dir / "signals" / file_safe(*rec.header.story_id));
  write_word_onsets(corpus.words, dir / "words.jsonl");

  PipelineConfig cfg;
  cfg.signals_dir = dir / "signals";
  cfg.annotations = dir / "words.jsonl";
  cfg.output_dir = dir / out;
  cfg.seed = 17;
  cfg.codec = tiny_codec();
  cfg.registry.neural_size = 16;
  cfg.train_steps = 3;
  cfg.pairs = {PairTag::EgToText, PairTag::TextToEg};
  return cfg;
}

}  // namespace

TEST(PipelineConfig, EnumeratesEveryProblem) {
  PipelineConfig cfg;
  cfg.signals_dir = "/no/such/dir";
  cfg.preprocess.high_hz = 300.0;
  cfg.codec.n_q = 0;
  cfg.registry.neural_size = 10;
  const auto p = cfg.problems();
  EXPECT_EQ(p.size(), 4u);
  try {
    cfg.validate();
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("4 problems"), std::string::npos);
    for (const auto& s : p) EXPECT_NE(msg.find(s), std::string::npos) << s;
  }
}

TEST(PipelineConfig, JsonRoundTripAndUnknownKeys) {
  PipelineConfig cfg;
  cfg.seed = 99;
  cfg.codec = tiny_codec();
  cfg.registry.neural_size = 16;
  cfg.pairs = {PairTag::SpeechToEg, PairTag::EgToText};
  const auto j = to_json(cfg);
  EXPECT_EQ(to_json(pipeline_config_from_json(j)), j);

  auto bad = j;
  bad["colour"] = "red";
  bad["train_steps"] = "many";
  bad["preprocess"]["window"] = 3;
  try {
    pipeline_config_from_json(bad);
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3 problems"), std::string::npos) << msg;
    EXPECT_NE(msg.find("colour"), std::string::npos);
    EXPECT_NE(msg.find("train_steps"), std::string::npos);
    EXPECT_NE(msg.find("preprocess: unknown key: window"), std::string::npos);
  }
}

TEST(Windows, FileRoundTrip) {
  TempDir dir;
  std::vector<WindowedSample> ws(3);
  SplitMix64 rng(1);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    ws[i].signal = Matrix<float>(2, 40);
    for (auto& v : ws[i].signal.data()) v = static_cast<float>(rng.normal());
    ws[i].story_id = "s" + std::to_string(i);
    ws[i].start_time_s = 0.5 * double(i);
  }
  ws[1].transcript = "naïve words";
  ws[2].speech_codes = std::vector<int>{1, 2, 3};
  write_windows(ws, dir / "w");
  const auto back = read_windows(dir / "w");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].signal.data(), ws[i].signal.data());
    EXPECT_EQ(back[i].story_id, ws[i].story_id);
    EXPECT_EQ(back[i].transcript, ws[i].transcript);
    EXPECT_EQ(back[i].speech_codes, ws[i].speech_codes);
  }
  EXPECT_EQ(pool_channels(back).size(), 6u);
}

TEST(Stages, PreprocessTrainBuildAreDeterministic) {
  TempDir dir;
  auto cfg = small_run(dir, "a");
  const auto s = run_preprocess(cfg);
  EXPECT_EQ(s.recordings, 4u);
  EXPECT_GT(s.train, 0u);
  EXPECT_EQ(s.audit.shared_sentences, 0u);
  EXPECT_EQ(s.audit.shared_words, 0u);
  run_train_codec(cfg);
  EXPECT_TRUE(fs::exists(cfg.output_dir / "codec.ckpt"));
  const auto model = load_codec(cfg.output_dir / "codec.ckpt");
  const auto built = run_build_dataset(cfg, model);
  EXPECT_EQ(built.per_split.at("train").records, 2 * s.train);

  auto again = cfg;
  again.output_dir = dir / "b";
  run_preprocess(again);
  run_train_codec(again);
  run_build_dataset(again, load_codec(again.output_dir / "codec.ckpt"));
  for (const char* f : {"windows/train.f32", "windows/test.jsonl", "loss.csv", "dataset/train.jsonl",
                        "dataset/val.jsonl", "dataset/vocab.json"})
    EXPECT_EQ(detail::read_text(cfg.output_dir / f), detail::read_text(again.output_dir / f)) << f;
}

TEST(Tokens, FileRoundTripAndShape) {
  TempDir dir;
  const CodecModel<float> model(tiny_codec(), 2);
  const VocabRegistry reg({151936, 1000, 16});
  SynthCorpusOptions o;
  o.stories = {"one"};
  o.channels = 3;
  o.story_duration_s = 2.55;
  o.sample_rate_hz = 400.0;
  const auto sig = synth_corpus(o, 1).recordings.front();

  const auto t = tokenize_signal(sig, model, reg);
  write_tokens(t, reg, dir / "tok.txt");
  const auto back = read_tokens(reg, dir / "tok.txt");
  EXPECT_EQ(back.tokens, t.tokens);
  EXPECT_EQ(back.header, t.header);
  EXPECT_EQ(back.pad, t.pad);
  const auto y = detokenize_signal(back.tokens, back.header, model, reg);
  EXPECT_EQ(y.samples.rows(), 3u);
  EXPECT_EQ(y.samples.cols(), sig.samples.cols());
}

TEST(Cli, HelpAndUnknownFlags) {
  const auto help = run_cli("--help");
  EXPECT_EQ(help.code, 0);
  for (const char* sub : {"synth-data", "preprocess", "train-codec", "tokenize", "detokenize", "build-dataset",
                          "evaluate", "report"})
    EXPECT_NE(help.out.find(sub), std::string::npos) << sub;
  EXPECT_EQ(run_cli("train-codec --help").code, 0);
  EXPECT_NE(run_cli("train-codec --no-such-flag 3").code, 0);
  EXPECT_NE(run_cli("no-such-command").code, 0);
}

TEST(Cli, InvalidConfigExitsWithValidationCode) {
  TempDir dir;
  detail::write_text(dir / "c.json", R"({"train_steps": 0, "bogus": 1})");
  const auto r = run_cli("preprocess --config " + q(dir / "c.json"));
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("bogus"), std::string::npos) << r.out;
}

TEST(Cli, EndToEndSmall) {
  TempDir dir;
  const auto cfg = small_run(dir);
  detail::write_text(dir / "cfg.json", to_json(cfg).dump(2));
  const std::string c = " --config " + q(dir / "cfg.json");
  ASSERT_EQ(run_cli("preprocess" + c).code, 0);
  const auto tr = run_cli("train-codec --quiet" + c);
  ASSERT_EQ(tr.code, 0) << tr.out;
  const auto ck = cfg.output_dir / "codec.ckpt";

  const auto sig = list_signals(cfg.signals_dir).front();
  ASSERT_EQ(run_cli("tokenize --checkpoint " + q(ck) + " --input " + q(sig) + " --output " + q(dir / "t.txt") + c).code, 0);
  const auto d = run_cli("detokenize --checkpoint " + q(ck) + " --input " + q(dir / "t.txt") + " --output " +
                         q(dir / "recon") + c);
  ASSERT_EQ(d.code, 0) << d.out;
  const auto orig = read_signal(sig), recon = read_signal(dir / "recon");
  EXPECT_EQ(recon.samples.rows(), orig.samples.rows());
  EXPECT_EQ(recon.samples.cols(), orig.samples.cols());
  EXPECT_EQ(recon.header.channel_names, orig.header.channel_names);

  ASSERT_EQ(run_cli("build-dataset" + c).code, 0);
  const auto records = read_chatml_jsonl(cfg.output_dir / "dataset" / "test.jsonl");
  ASSERT_FALSE(records.empty());

  // Echo the references back as predictions.
  std::string refs;
  for (const auto& r : records)
    if (r.pair == PairTag::EgToText) refs += r.messages[2].content + "\n";
  detail::write_text(dir / "ref.txt", refs);
  const auto ev = run_cli("evaluate --predictions " + q(dir / "ref.txt") + " --references " + q(dir / "ref.txt") +
                          " --output " + q(dir / "eval"));
  ASSERT_EQ(ev.code, 0) << ev.out;
  const auto m = nlohmann::json::parse(detail::read_text(dir / "eval" / "metrics.json"));
  EXPECT_EQ(m.at("bleu1_pct").get<double>(), 100.0);
  EXPECT_EQ(m.at("cer_pct").get<double>(), 0.0);

  const auto rep = run_cli("report --checkpoint " + q(ck) + " --input " + q(sig) + " --duration 2 --output " +
                           q(dir / "report"));
  ASSERT_EQ(rep.code, 0) << rep.out;
  EXPECT_TRUE(fs::exists(dir / "report" / "timeseries.png"));
}
