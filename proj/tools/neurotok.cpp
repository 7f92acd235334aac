// neurotok: command-line driver for the signal tokenization pipeline.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "neurotok/metrics.hpp"
#include "neurotok/pipeline.hpp"
#include "neurotok/report.hpp"
#include "neurotok/synth.hpp"

namespace fs = std::filesystem;
using namespace neurotok;

namespace {

// Flags shared by the config-driven commands; anything set here wins over
// the config file.
struct Overrides {
  std::string config;
  std::optional<std::string> signals_dir, annotations, output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, codebook_size, n_q, batch_size, base_channels;
  std::optional<double> learning_rate;
  std::vector<std::string> pairs;

  void add_to(CLI::App* app, bool training_flags) {
    app->add_option("--config", config, "Pipeline configuration JSON")->check(CLI::ExistingFile);
    app->add_option("--signals", signals_dir, "Directory of recordings (<name>.json + <name>.f32)");
    app->add_option("--annotations", annotations, "Word-onset JSON lines file");
    app->add_option("--output", output_dir, "Output directory");
    app->add_option("--seed", seed, "Random seed (64-bit)");
    if (training_flags) {
      app->add_option("--steps", steps, "Training steps");
      app->add_option("--codebook-size", codebook_size, "Codewords per quantizer stage");
      app->add_option("--n-q", n_q, "Residual quantizer stages");
      app->add_option("--batch-size", batch_size, "Training batch size");
      app->add_option("--base-channels", base_channels, "Encoder base channel count");
      app->add_option("--lr", learning_rate, "Adam learning rate");
    }
  }

  PipelineConfig resolve() const {
    PipelineConfig cfg = config.empty() ? PipelineConfig{} : load_pipeline_config(config);
    if (signals_dir) cfg.signals_dir = *signals_dir;
    if (annotations) cfg.annotations = *annotations;
    if (output_dir) cfg.output_dir = *output_dir;
    if (seed) cfg.seed = *seed;
    if (steps) cfg.train_steps = *steps;
    if (codebook_size) cfg.codec.codebook_size = cfg.registry.neural_size = *codebook_size;
    if (n_q) cfg.codec.n_q = *n_q;
    if (batch_size) cfg.codec.batch_size = *batch_size;
    if (base_channels) cfg.codec.base_channels = *base_channels;
    if (learning_rate) cfg.codec.learning_rate = *learning_rate;
    if (!pairs.empty()) {
      cfg.pairs.clear();
      for (const auto& p : pairs) cfg.pairs.push_back(parse_pair(p));
    }
    cfg.validate();
    return cfg;
  }
};

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural signal tokenizer pipeline"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Write a seeded synthetic multi-story corpus");
  std::string synth_out = "data/synthetic";
  std::uint64_t synth_seed = 0;
  SynthCorpusOptions synth_opt;
  synth->add_option("--output", synth_out, "Directory for recordings and words.jsonl")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Random seed")->capture_default_str();
  synth->add_option("--channels", synth_opt.channels, "Channels per recording")->capture_default_str();
  synth->add_option("--duration", synth_opt.story_duration_s, "Seconds per story")->capture_default_str();
  synth->add_option("--sample-rate", synth_opt.sample_rate_hz, "Sampling rate in Hz")->capture_default_str();
  synth->add_option("--stories", synth_opt.stories, "Story identifiers")->capture_default_str();

  Overrides pre_ov, train_ov, build_ov;
  auto* pre = app.add_subcommand("preprocess", "Filter, resample, window and split recordings");
  pre_ov.add_to(pre, false);

  auto* train = app.add_subcommand("train-codec", "Train the codec on single-channel training windows");
  train_ov.add_to(train, true);
  bool quiet = false;
  train->add_flag("--quiet", quiet, "Suppress per-step progress");

  // tokenize / detokenize
  std::string tok_ckpt, tok_in, tok_out, tok_config;
  auto* tok = app.add_subcommand("tokenize", "Signal file -> neural token text");
  tok->add_option("--checkpoint", tok_ckpt, "Codec checkpoint")->required()->check(CLI::ExistingFile);
  tok->add_option("--input", tok_in, "Signal (<name>, <name>.json or <name>.f32)")->required();
  tok->add_option("--output", tok_out, "Token text file (header sidecar written to <output>.json)")->required();
  tok->add_option("--config", tok_config, "Pipeline configuration JSON (registry section)")->check(CLI::ExistingFile);

  std::string detok_ckpt, detok_in, detok_out, detok_config;
  auto* detok = app.add_subcommand("detokenize", "Neural token text -> signal file");
  detok->add_option("--checkpoint", detok_ckpt, "Codec checkpoint")->required()->check(CLI::ExistingFile);
  detok->add_option("--input", detok_in, "Token text file with its .json sidecar")->required()->check(CLI::ExistingFile);
  detok->add_option("--output", detok_out, "Output signal path")->required();
  detok->add_option("--config", detok_config, "Pipeline configuration JSON (registry section)")->check(CLI::ExistingFile);

  // build-dataset
  auto* build = app.add_subcommand("build-dataset", "Emit chatml JSON lines for the requested modality pairs");
  build_ov.add_to(build, false);
  std::string build_ckpt;
  build->add_option("--checkpoint", build_ckpt, "Codec checkpoint (default <output>/codec.ckpt)");
  build->add_option("--pairs", build_ov.pairs, "Modality pairs, e.g. eg->text speech->eg");

  // evaluate
  std::string ev_pred, ev_ref, ev_jsonl, ev_out, ev_external;
  std::optional<std::uint64_t> ev_baseline;
  auto* eval = app.add_subcommand("evaluate", "Text metrics over predictions and references");
  eval->add_option("--predictions", ev_pred, "Predictions, one per line")->check(CLI::ExistingFile);
  eval->add_option("--references", ev_ref, "References, line-aligned with predictions")->check(CLI::ExistingFile);
  eval->add_option("--jsonl", ev_jsonl, "JSON lines of {prediction, references}")->check(CLI::ExistingFile);
  eval->add_option("--output", ev_out, "Directory for metrics.json and scores.csv");
  eval->add_option("--external-scores", ev_external, "Per-pair scores from an external scorer, one per line")
      ->check(CLI::ExistingFile);
  eval->add_option("--random-baseline", ev_baseline, "Also score the random-selection baseline with this seed");

  // report
  std::string rep_ckpt, rep_in, rep_out = "report";
  std::size_t rep_channel = 0;
  double rep_start = 0.0, rep_duration = 4.0;
  auto* rep = app.add_subcommand("report", "Reconstruction report (time series and STFT comparisons)");
  rep->add_option("--checkpoint", rep_ckpt, "Codec checkpoint")->required()->check(CLI::ExistingFile);
  rep->add_option("--input", rep_in, "Signal file")->required();
  rep->add_option("--output", rep_out, "Report directory")->capture_default_str();
  rep->add_option("--channel", rep_channel, "Channel index")->capture_default_str();
  rep->add_option("--start", rep_start, "Segment start in seconds")->capture_default_str();
  rep->add_option("--duration", rep_duration, "Segment length in seconds (0: to the end)")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      fs::create_directories(synth_out);
      const auto corpus = synth_corpus(synth_opt, synth_seed);
      for (const auto& rec : corpus.recordings) write_signal(rec, fs::path(synth_out) / file_safe(*rec.header.story_id));
      write_word_onsets(corpus.words, fs::path(synth_out) / "words.jsonl");
      print_json({{"recordings", corpus.recordings.size()}, {"words", corpus.words.size()}, {"output", synth_out}});
    } else if (*pre) {
      const auto cfg = pre_ov.resolve();
      const auto s = run_preprocess(cfg);
      print_json({{"recordings", s.recordings},
                  {"windows", {{"train", s.train}, {"val", s.val}, {"test", s.test}}},
                  {"overlap", {{"sentences", s.audit.shared_sentences}, {"words", s.audit.shared_words}}}});
    } else if (*train) {
      const auto cfg = train_ov.resolve();
      fs::create_directories(cfg.output_dir);
      detail::write_text(cfg.output_dir / "train_config.json", to_json(cfg).dump(2) + "\n");
      TrainOptions opt;
      if (!quiet)
        opt.on_step = [&](std::size_t step, const LossReport& r) {
          if (step == 1 || step % 50 == 0 || step == cfg.train_steps)
            std::fprintf(stderr, "step %zu  l_t %.4f  l_f %.3f  l_w %.4f  l_d %.4f  l_G %.3f\n", step, r.l_t, r.l_f,
                         r.l_w, r.l_d, r.l_G);
        };
      try {
        const auto res = run_train_codec(cfg, opt);
        print_json({{"steps", res.history.size()},
                    {"seconds", res.seconds},
                    {"checkpoint", (cfg.output_dir / "codec.ckpt").string()},
                    {"loss_csv", (cfg.output_dir / "loss.csv").string()}});
      } catch (const TrainingDiverged& e) {
        std::cerr << "error: training diverged: " << e.what() << "\n";
        return 3;
      }
    } else if (*tok) {
      const auto cfg = tok_config.empty() ? PipelineConfig{} : load_pipeline_config(tok_config);
      const auto model = load_codec(tok_ckpt);
      RegistryConfig rc = cfg.registry;
      if (tok_config.empty()) rc.neural_size = model.config().codebook_size;
      const VocabRegistry reg(rc);
      const auto t = tokenize_signal(read_signal(tok_in), model, reg);
      write_tokens(t, reg, tok_out);
      print_json({{"steps", t.tokens.steps()}, {"channels", t.tokens.channels()}, {"pad", t.pad}});
    } else if (*detok) {
      const auto cfg = detok_config.empty() ? PipelineConfig{} : load_pipeline_config(detok_config);
      const auto model = load_codec(detok_ckpt);
      RegistryConfig rc = cfg.registry;
      if (detok_config.empty()) rc.neural_size = model.config().codebook_size;
      const VocabRegistry reg(rc);
      const auto t = read_tokens(reg, detok_in);
      const auto sig = detokenize_signal(t.tokens, t.header, model, reg);
      write_signal(sig, detok_out);
      print_json({{"channels", sig.samples.rows()}, {"samples", sig.samples.cols()}});
    } else if (*build) {
      const auto cfg = build_ov.resolve();
      const auto model = load_codec(build_ckpt.empty() ? cfg.output_dir / "codec.ckpt" : fs::path(build_ckpt));
      const auto summary = run_build_dataset(cfg, model);
      nlohmann::json out = nlohmann::json::object();
      for (const auto& [split, ds] : summary.per_split) {
        nlohmann::json skipped = nlohmann::json::object();
        for (const auto& [pair, n] : ds.skipped) skipped[pair_name(pair)] = n;
        out[split] = {{"records", ds.records}, {"skipped", skipped}};
        for (const auto& [pair, n] : ds.skipped)
          std::fprintf(stderr, "%s: skipped %zu windows for %s (missing payload)\n", split.c_str(), n,
                       pair_name(pair).c_str());
      }
      print_json(out);
    } else if (*eval) {
      std::vector<EvalPair> pairs;
      if (!ev_jsonl.empty()) {
        if (!ev_pred.empty() || !ev_ref.empty()) throw ValidationError("use either --jsonl or --predictions/--references");
        std::size_t line_no = 0;
        for (const auto& line : read_lines(ev_jsonl)) {
          ++line_no;
          if (line.empty()) continue;
          try {
            const auto j = nlohmann::json::parse(line);
            pairs.push_back({j.at("prediction").get<std::string>(), j.at("references").get<std::vector<std::string>>()});
          } catch (const nlohmann::json::exception& e) {
            throw ParseError(ev_jsonl + ": " + e.what(), line_no);
          }
        }
      } else {
        if (ev_pred.empty() || ev_ref.empty()) throw ValidationError("evaluate needs --predictions and --references");
        const auto preds = read_lines(ev_pred), refs = read_lines(ev_ref);
        if (preds.size() != refs.size())
          throw ValidationError("predictions (" + std::to_string(preds.size()) + " lines) and references (" +
                                std::to_string(refs.size()) + " lines) are not aligned");
        for (std::size_t i = 0; i < preds.size(); ++i) pairs.push_back({preds[i], {refs[i]}});
      }
      nlohmann::json out = to_json(evaluate_pairs(pairs));
      if (!ev_external.empty()) {
        const auto lines = read_lines(ev_external);
        if (lines.size() != pairs.size()) throw ValidationError("external scores are not aligned with the pairs");
        double acc = 0.0;
        for (const auto& l : lines) acc += std::stod(l);
        out["external_mean"] = acc / static_cast<double>(lines.size());
      }
      if (ev_baseline) {
        std::vector<std::string> refs;
        for (const auto& p : pairs) refs.push_back(p.references.front());
        out["random_baseline"] = to_json(random_selecting_baseline(refs, *ev_baseline));
      }
      if (!ev_out.empty()) {
        fs::create_directories(ev_out);
        detail::write_text(fs::path(ev_out) / "metrics.json", out.dump(2) + "\n");
        std::ofstream csv(fs::path(ev_out) / "scores.csv", std::ios::trunc);
        csv << "index,bleu1,rouge1_recall,rouge1_precision,rouge1_f,cer,wer\n";
        const auto scores = score_pairs(pairs);
        char buf[200];
        for (std::size_t i = 0; i < scores.size(); ++i) {
          const auto& s = scores[i];
          std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", i, s.bleu1, s.rouge.recall,
                        s.rouge.precision, s.rouge.f, s.cer, s.wer);
          csv << buf << '\n';
        }
        if (!csv) throw IoError("write failed: scores.csv");
      }
      print_json(out);
    } else if (*rep) {
      const auto model = load_codec(rep_ckpt);
      const auto sig = read_signal(rep_in);
      if (rep_channel >= sig.samples.rows()) throw ValidationError("channel index out of range");
      const double fs_hz = sig.header.sample_rate_hz;
      const auto first = static_cast<std::size_t>(std::llround(rep_start * fs_hz));
      if (first >= sig.header.num_samples) throw ValidationError("segment start is past the end of the signal");
      std::size_t n = sig.header.num_samples - first;
      if (rep_duration > 0.0) n = std::min(n, static_cast<std::size_t>(std::llround(rep_duration * fs_hz)));
      const auto row = sig.samples.row(rep_channel).subspan(first, n);
      const auto files = reconstruct_report(row, model, rep_out);
      print_json({{"timeseries_csv", files.timeseries_csv.string()},
                  {"timeseries_png", files.timeseries_png.string()},
                  {"spectra", files.spectra_png.size()}});
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
