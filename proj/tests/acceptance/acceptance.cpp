// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails. Pass criterion names as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "neurotok/metrics.hpp"
#include "neurotok/pipeline.hpp"
#include "neurotok/preprocess.hpp"
#include "neurotok/prompt_forge.hpp"
#include "neurotok/synth.hpp"
#include "neurotok/token_codec.hpp"
#include "neurotok/trainer.hpp"

using namespace neurotok;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Collects failed sub-checks for one criterion.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (!ok && failures_.size() < 8) failures_.push_back(what);
    if (!ok) ++failed_;
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool ok() const { return failed_ == 0; }

  std::string summary() const {
    std::ostringstream out;
    out << (total_ - failed_) << "/" << total_ << " checks";
    for (const auto& n : notes_) out << "; " << n;
    for (const auto& f : failures_) out << "; failed: " << f;
    return out.str();
  }

 private:
  std::size_t total_ = 0, failed_ = 0;
  std::vector<std::string> failures_, notes_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

ad::Parameter<double> random_param(const std::string& name, ad::Shape shape, SplitMix64& rng) {
  ad::Parameter<double> p(name, std::move(shape));
  for (auto& v : p.value) v = rng.normal();
  return p;
}

ad::Tensor<double> probe(const ad::Tensor<double>& y, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<double> shift(y.size());
  for (auto& w : shift) w = rng.normal();
  return ad::l2sq(ad::add(y, y.tape().constant(y.shape(), shift)));
}

// ---------------------------------------------------------------------------

void gradient_suite(Check& c) {
  const auto t0 = Clock::now();
  double worst_op = 0.0;
  auto record = [&](const std::string& name, std::uint64_t seed, const ad::GradCheckResult& r) {
    worst_op = std::max(worst_op, r.max_relative_error);
    c.expect(r.max_relative_error < 1e-3, name + " seed " + std::to_string(seed) + " rel " +
                                              fmt("%.3g", r.max_relative_error));
  };
  using namespace ad;
  using Op = std::function<Tensor<double>(const Tensor<double>&, const Tensor<double>&)>;
  const std::vector<std::pair<std::string, Op>> ops = {
      {"elu", [](auto& a, auto&) { return sum(elu(a)); }},
      {"add", [](auto& a, auto& b) { return l2sq(add(a, b)); }},
      {"sub", [](auto& a, auto& b) { return l2sq(sub(a, b)); }},
      {"div", [](auto& a, auto& b) { return sum(div(a, add_scalar(abs(b), 1.0))); }},
      {"mul_scalar", [](auto& a, auto&) { return l2sq(mul_scalar(a, -2.5)); }},
      {"add_scalar", [](auto& a, auto&) { return l2sq(add_scalar(a, 0.75)); }},
      {"relu", [](auto& a, auto& b) { return l2sq(relu(add(a, b))); }},
      {"abs", [](auto& a, auto&) { return l2sq(abs(a)); }},
      {"sqrt", [](auto& a, auto&) { return sum(sqrt(add_scalar(abs(a), 0.5))); }},
      {"l1", [](auto& a, auto& b) { return l1(sub(a, b)); }},
      {"l2sq", [](auto& a, auto&) { return l2sq(a); }},
      {"mean", [](auto& a, auto&) { return mean(elu(a)); }},
      {"avg_pool1d", [](auto& a, auto&) { return l2sq(avg_pool1d(a, 3)); }},
  };
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const auto& [name, op] : ops) {
      SplitMix64 rng(seed * 31 + 7);
      auto a = random_param("a", {1, 2, 12}, rng), b = random_param("b", {1, 2, 12}, rng);
      record(name, seed, grad_check([&](Tape<double>& t) { return op(t.parameter(a), t.parameter(b)); }, {&a, &b}));
    }
    {
      SplitMix64 rng(seed);
      const std::size_t stride = 1 + seed % 3, pad = seed % 2, K = 2 + seed % 4;
      auto x = random_param("x", {2, 3, 17}, rng), w = random_param("w", {2, 3, K}, rng), b = random_param("b", {2}, rng);
      record("conv1d", seed, grad_check([&](Tape<double>& t) {
               return probe(conv1d(t.parameter(x), t.parameter(w), t.parameter(b), stride, pad), seed);
             }, {&x, &w, &b}));
    }
    {
      SplitMix64 rng(seed + 100);
      const std::size_t stride = 1 + seed % 4, K = stride + 1 + seed % 3, pad = seed % 2;
      auto x = random_param("x", {2, 3, 9}, rng), w = random_param("w", {3, 2, K}, rng), b = random_param("b", {2}, rng);
      record("conv_transpose1d", seed, grad_check([&](Tape<double>& t) {
               return probe(conv_transpose1d(t.parameter(x), t.parameter(w), t.parameter(b), stride, pad), seed);
             }, {&x, &w, &b}));
    }
    {
      SplitMix64 rng(seed + 900);
      auto x = random_param("x", {2, 1, 96}, rng);
      record("dft_magnitude", seed, grad_check([&](Tape<double>& t) {
               return probe(dft_magnitude(t.parameter(x), StftScale{32, 8}), seed);
             }, {&x}));
    }
  }

  // Full generator objective on a micro-model, quantiser frozen.
  CodecConfig cfg;
  cfg.base_channels = 2;
  cfg.embed_dim = 4;
  cfg.codebook_size = 8;
  cfg.n_q = 2;
  cfg.stft.scales = {{128, 32}, {64, 16}, {32, 8}};
  cfg.disc_count = 2;
  cfg.disc_layers = 2;
  cfg.disc_channels = 2;
  double worst_model = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CodecModel<double> model(cfg, seed);
    SplitMix64 rng(seed + 100);
    std::vector<double> x(200);
    for (auto& v : x) v = rng.normal();

    Tape<double> tape;
    ParamLeaves<double> gen(tape, model.generator_params(), Binding::Detached);
    ParamLeaves<double> disc(tape, model.discriminator_params(), Binding::Frozen);
    auto g = generator_forward<double>(model, tape, gen, x);
    generator_adversarial(model, disc, g);
    const auto frozen = freeze_quantization(g);
    tape.backward(g.total);
    auto grads = neurotok::detail::zero_acc(model.generator_params());
    gen.add_grad_to(grads, 1.0);

    auto objective = [&] {
      Tape<double> t;
      ParamLeaves<double> gp(t, model.generator_params(), Binding::Frozen);
      ParamLeaves<double> dp(t, model.discriminator_params(), Binding::Frozen);
      auto pass = generator_forward<double>(model, t, gp, x, &frozen);
      generator_adversarial(model, dp, pass);
      return pass.total.item();
    };
    auto& params = model.generator_params();
    for (std::size_t probe_i = 0; probe_i < 2 * params.size(); ++probe_i) {
      const std::size_t pi = probe_i / 2, k = rng.below(params[pi].value.size());
      const double h = 1e-7, orig = params[pi].value[k];
      params[pi].value[k] = orig + h;
      const double up = objective();
      params[pi].value[k] = orig - h;
      const double down = objective();
      params[pi].value[k] = orig;
      const double numeric = (up - down) / (2 * h), analytic = grads[pi][k];
      const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-2});
      worst_model = std::max(worst_model, rel);
      c.expect(rel < 1e-3, "L_G " + params[pi].name + " seed " + std::to_string(seed) + " rel " + fmt("%.3g", rel));
    }
  }
  const double secs = since(t0);
  c.expect(secs < 120.0, "runtime " + fmt("%.1f s", secs));
  c.note("max rel err ops " + fmt("%.2e", worst_op) + ", L_G " + fmt("%.2e", worst_model) + ", " + fmt("%.1f s", secs));
}

void loss_identities(Check& c) {
  SplitMix64 rng(1);
  std::vector<double> x(1024);
  for (auto& v : x) v = rng.normal();
  c.expect(loss_reconstruction(x, x) == 0.0, "L_t(x, x) = 0");
  c.expect(loss_stft(x, x, StftConfig::defaults()) == 0.0, "L_f(x, x) = 0");
  const FeatureSet f{{{1.0, -2.0, 3.0}, {0.5}}, {{4.0, 4.0}}};
  c.expect(loss_feature_match(f, f) == 0.0, "L_feat identical = 0");
  c.expect(loss_discriminator(std::vector<double>{1, 1, 1}, std::vector<double>{-1, -1, -1}) == 0.0, "L_D margins");

  c.expect(loss_reconstruction(std::vector<double>{1, 1}, std::vector<double>{0, 0}) == 1.0, "L_t [1,1] vs [0,0]");
  c.expect(loss_discriminator(std::vector<double>{0}, std::vector<double>{0}) == 2.0, "L_D 0/0 K=1");
  c.expect(loss_discriminator(std::vector<double>{-1, -1}, std::vector<double>{1, 1}) == 4.0, "L_D K=2");
  c.expect(loss_generator_adv(std::vector<double>{1, 1}) == 0.0, "L_g at 1");
  c.expect(loss_generator_adv(std::vector<double>{0}) == 1.0, "L_g 0 K=1");
  c.expect(loss_generator_adv(std::vector<double>{-3, 1, 1}) == 4.0 / 3.0, "L_g K=3");
  c.expect(std::abs(loss_feature_match({{{2, 2}}}, {{{0, 0}}}) - 2.0) < 1e-7, "L_feat [2,2] vs [0,0]");
  LossReport r;
  c.expect(loss_total(r, {}) == 0.0, "L_G zeros");
  r.l_t = 1.0;
  c.expect(loss_total(r, {}) == 500.0, "L_G L_t=1");
  r = {};
  r.l_t = 0.1, r.l_f = 2.0, r.l_g = 0.5, r.l_feat = 1.0, r.l_w = 0.3;
  c.expect(std::abs(loss_total(r, {}) - 72.5) < 1e-12, "L_G 72.5");

  // Recombination on real forward passes.
  CodecConfig cfg;
  cfg.base_channels = 2;
  cfg.embed_dim = 4;
  cfg.codebook_size = 8;
  cfg.stft.scales = {{128, 32}, {64, 16}};
  CodecModel<double> model(cfg, 3);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> s(400);
    for (auto& v : s) v = rng.normal();
    ad::Tape<double> tape;
    ParamLeaves<double> gen(tape, model.generator_params(), Binding::Frozen);
    ParamLeaves<double> disc(tape, model.discriminator_params(), Binding::Frozen);
    auto g = generator_forward<double>(model, tape, gen, s);
    generator_adversarial(model, disc, g);
    LossReport rep;
    rep.l_t = g.l_t.item(), rep.l_f = g.l_f.item(), rep.l_w = g.l_w.item();
    rep.l_g = g.l_g->item(), rep.l_feat = g.l_feat->item();
    c.expect(std::abs(g.total.item() - loss_total(rep, cfg.weights)) < 1e-6, "L_G recombination");
  }
}

void training_run(Check& c) {
  CodecConfig cfg;
  cfg.n_q = 4;
  cfg.learning_rate = 1e-3;
  const auto windows = synth_windows(512, SynthOptions{}, 1);
  TrainOptions opt;
  opt.seed = 3;
  opt.steps = 2000;
  opt.on_step = [](std::size_t step, const LossReport& r) {
    if (step % 100 == 0) std::fprintf(stderr, "  train step %zu l_t %.4f l_f %.3f\n", step, r.l_t, r.l_f);
  };

  CodecModel<float> model(cfg, 7);
  const auto res = train_codec(model, windows, opt);
  const auto& h = res.history;
  c.expect(h.size() == 2000, "2000 steps recorded");
  const double t0 = moving_average(h, &LossReport::l_t, 0, 10), t1 = moving_average(h, &LossReport::l_t, h.size() - 10, 10);
  const double f0 = moving_average(h, &LossReport::l_f, 0, 10), f1 = moving_average(h, &LossReport::l_f, h.size() - 10, 10);
  c.expect(t1 <= 0.5 * t0, "L_t ratio " + fmt("%.3f", t1 / t0));
  c.expect(f1 <= 0.7 * f0, "L_f ratio " + fmt("%.3f", f1 / f0));
  c.expect(res.seconds < 1800.0, "runtime " + fmt("%.0f s", res.seconds));

  // Same seeds, shorter horizon: the history must agree bit-for-bit.
  TrainOptions again = opt;
  again.steps = 20;
  again.on_step = nullptr;
  CodecModel<float> m2(cfg, 7), m3(cfg, 7);
  const auto r2 = train_codec(m2, windows, again), r3 = train_codec(m3, windows, again);
  bool same = true;
  for (std::size_t i = 0; i < 20; ++i)
    same &= loss_csv_row(i, r2.history[i]) == loss_csv_row(i, h[i]) && loss_csv_row(i, r3.history[i]) == loss_csv_row(i, h[i]);
  for (std::size_t i = 0; i < m2.generator_params().size(); ++i)
    same &= m2.generator_params()[i].value == m3.generator_params()[i].value;
  c.expect(same, "deterministic per seed");

  // Reconstruction quality on fresh in-distribution windows.
  const auto held = synth_windows(16, SynthOptions{}, 99);
  double num = 0.0, den = 0.0;
  for (const auto& w : held) {
    const auto y = reconstruct<float>(model, w);
    for (std::size_t i = 0; i < w.size(); ++i) {
      num += (double(y[i]) - w[i]) * (double(y[i]) - w[i]);
      den += double(w[i]) * w[i];
    }
  }
  c.note("L_t " + fmt("%.4f", t0) + " -> " + fmt("%.4f", t1) + " (" + fmt("%.3f", t1 / t0) + "), L_f " + fmt("%.3f", f0) +
         " -> " + fmt("%.3f", f1) + " (" + fmt("%.3f", f1 / f0) + "), " + fmt("%.0f s", res.seconds) +
         ", held-out rel L2 " + fmt("%.3f", std::sqrt(num / den)));
}

Matrix<double> random_matrix(std::size_t rows, std::size_t cols, SplitMix64& rng) {
  Matrix<double> m(rows, cols);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

Matrix<int> brute_force_codes(const Matrix<double>& z, const RvqState<double>& st) {
  Matrix<int> codes(st.num_stages(), z.cols());
  for (std::size_t t = 0; t < z.cols(); ++t) {
    std::vector<double> r(z.rows());
    for (std::size_t i = 0; i < z.rows(); ++i) r[i] = z(i, t);
    for (std::size_t s = 0; s < st.num_stages(); ++s) {
      const auto& e = st.stages[s].entries;
      int best = -1;
      double best_d = 0.0;
      for (std::size_t k = 0; k < e.rows(); ++k) {
        double d = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) d += (r[i] - e(k, i)) * (r[i] - e(k, i));
        if (best < 0 || d < best_d) best = int(k), best_d = d;
      }
      codes(s, t) = best;
      for (std::size_t i = 0; i < r.size(); ++i) r[i] -= e(std::size_t(best), i);
    }
  }
  return codes;
}

double column_norm(const Matrix<double>& m, std::size_t t) {
  double acc = 0.0;
  for (std::size_t r = 0; r < m.rows(); ++r) acc += m(r, t) * m(r, t);
  return std::sqrt(acc);
}

void rvq_suite(Check& c) {
  for (std::size_t V : {4, 17, 37, 64})
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      RvqState<double> st(3, V, 6);
      SplitMix64 rng(seed * 7 + V);
      for (std::size_t s = 0; s < 3; ++s)
        for (auto& v : st.stages[s].entries.data()) v = rng.normal() / double(s + 1);
      const auto z = random_matrix(6, 50, rng);
      c.expect(quantize(z, st).codes == brute_force_codes(z, st), "nearest neighbour V=" + std::to_string(V));
    }

  const std::size_t V = 64, R = 8, stages = 4;
  RvqState<double> st(stages, V, R);
  SplitMix64 rng(2024);
  std::vector<Matrix<double>> init = {random_matrix(R, 512, rng)};
  init_codebooks_kmeanspp<double>(st, init, rng);
  for (int step = 0; step < 1000; ++step) {
    std::vector<QuantizeResult<double>> batch = {quantize(random_matrix(R, 256, rng), st)};
    update_codebooks_ema<double>(st, batch, EmaOptions{0.99, 1e-5, 100}, rng);
  }
  const auto eval = quantize(random_matrix(R, 4096, rng), st);
  double min_entropy = 1e9;
  for (std::size_t s = 0; s < stages; ++s) {
    const double e = usage_entropy(eval.codes.row(s), V);
    min_entropy = std::min(min_entropy, e);
    c.expect(e > 0.5 * std::log(double(V)), "usage entropy stage " + std::to_string(s) + " " + fmt("%.3f", e));
  }
  std::size_t violations = 0;
  for (std::size_t t = 0; t < eval.codes.cols(); ++t) {
    double prev = column_norm(eval.stage_inputs[0], t);
    for (std::size_t s = 1; s < stages; ++s) {
      const double cur = column_norm(eval.stage_inputs[s], t);
      violations += cur > prev + 1e-12;
      prev = cur;
    }
    Matrix<double> last(R, 1);
    for (std::size_t r = 0; r < R; ++r) last(r, 0) = eval.stage_inputs[stages - 1](r, t) - eval.stage_outputs[stages - 1](r, t);
    violations += column_norm(last, 0) > prev + 1e-12;
  }
  c.expect(violations == 0, "residual monotonicity violations " + std::to_string(violations));

  const auto again = quantize(dequantize(eval.codes, st), st);
  std::string per_stage;
  std::size_t differ = 0;
  for (std::size_t s = 0; s < stages; ++s) {
    std::size_t n = 0;
    for (std::size_t t = 0; t < eval.codes.cols(); ++t) n += again.codes(s, t) != eval.codes(s, t);
    per_stage += (s ? "/" : "") + std::to_string(n);
    differ += n;
  }
  c.expect(differ == 0, "idempotence with " + std::to_string(stages) + " stages: codes changed per stage " + per_stage +
                            " of " + std::to_string(eval.codes.cols()));

  // Single stage, the serialized configuration.
  RvqState<double> one(1, V, R);
  one.stages[0] = st.stages[0];
  const auto q1 = quantize(random_matrix(R, 4096, rng), one);
  c.expect(quantize(dequantize(q1.codes, one), one).codes == q1.codes, "idempotence with 1 stage");
  c.note("min stage entropy " + fmt("%.3f", min_entropy) + " (bound " + fmt("%.3f", 0.5 * std::log(64.0)) + ")");
}

void token_format(Check& c) {
  const VocabRegistry reg;
  SplitMix64 rng(2024);
  std::size_t bad = 0;
  for (int i = 0; i < 10000; ++i) {
    NeuralTokenSequence s;
    const std::size_t C = 1 + rng.below(8), T = rng.below(65);
    for (std::size_t ch = 0; ch < C; ++ch) s.channel_names.push_back("MEG" + std::to_string(ch));
    s.codes = Matrix<int>(T, C);
    for (auto& v : s.codes.data()) v = static_cast<int>(rng.below(reg.neural_size()));
    const auto text = serialize_neural(s, reg);
    bad += !(parse_neural(text, reg, s.channel_names) == s && serialize_neural(parse_neural(text, reg, s.channel_names), reg) == text);

    std::vector<int> sp(rng.below(40));
    for (auto& v : sp) v = static_cast<int>(rng.below(reg.speech_size()));
    bad += parse_speech(serialize_speech(sp, reg), reg) != sp;
  }
  c.expect(bad == 0, "round-trip mismatches " + std::to_string(bad));

  const std::string system =
      "You are a helpful assistant named NeuGPT. You can understand and produce neural signals, and you can interact "
      "with speech and text modalities.";
  const auto speech = build_prompt_with_instruction(
      PairTag::TextToSpeech, "Can you speak the text using an exaggerated accent?",
      "as the snake squeezed him tighter and tighter,", serialize_speech(std::vector<int>{334, 77, 332, 334}, reg),
      pretraining_format());
  c.expect(speech.messages.size() == 3 && speech.messages[0].content == system &&
               speech.messages[1].content ==
                   "Can you speak the text using an exaggerated accent? This is input: as the snake squeezed him "
                   "tighter and tighter," &&
               speech.messages[2].content == "<sosp><334><77><332><334><eosp>",
           "speech surface form");

  NeuralTokenSequence eg;
  const std::vector<int> row{5792, 7851, 7851, 7851, 7851, 8128, 7386, 5857, 7343, 7598, 7851, 3241, 3663};
  for (std::size_t ch = 0; ch < row.size(); ++ch) eg.channel_names.push_back(std::to_string(ch));
  eg.codes = Matrix<int>(1, row.size(), row);
  const std::string eg_text =
      "<soeg><nts><EG5792><EG7851><EG7851><EG7851><EG7851><EG8128><EG7386><EG5857><EG7343><EG7598><EG7851><EG3241>"
      "<EG3663><eoeg>";
  c.expect(serialize_neural(eg, reg) == eg_text, "neural surface form");
  const auto neural = build_prompt_with_instruction(PairTag::EgToText, "Convert the following eg input to text:",
                                                    eg_text, "incomplete page before him. His pen flickered");
  c.expect(neural.messages.size() == 3 && neural.messages[0].content == system &&
               neural.messages[1].content == "Convert the following eg input to text:\nThis is the input:" + eg_text &&
               neural.messages[2].content == "incomplete page before him. His pen flickered",
           "neural prompt surface form");
}

NeuralSignal constant_signal(std::size_t n, double rate, std::size_t channels = 1) {
  NeuralSignal s;
  s.header.sample_rate_hz = rate;
  s.header.num_samples = n;
  s.header.story_id = "lw1";
  s.samples = Matrix<float>(channels, n);
  for (std::size_t ch = 0; ch < channels; ++ch) s.header.channel_names.push_back("ch" + std::to_string(ch));
  return s;
}

void preprocessing(Check& c) {
  c.expect(extract_windows(constant_signal(60 * 400, 400.0, 2), {}, 42).size() == 57, "57 windows for 60 s");
  c.expect(resample(constant_signal(1000, 1000.0), 400.0).header.num_samples == 400, "1000 -> 400 samples");
  c.expect(resample(constant_signal(1001, 1000.0), 400.0).header.num_samples == 400, "1001 -> 400 samples");
  c.expect(resample(constant_signal(1003, 1000.0), 400.0).header.num_samples == 401, "1003 -> 401 samples");
  c.expect(resample(constant_signal(2500, 1000.0), 400.0).samples.cols() == 1000, "2500 -> 1000 samples");

  auto probe_db = [](double freq, std::size_t n, std::size_t skip) {
    NeuralSignal s = constant_signal(n, 1000.0);
    for (std::size_t i = 0; i < n; ++i) s.samples(0, i) = float(std::sin(2.0 * std::numbers::pi * freq * double(i) / 1000.0));
    const auto y = bandpass(s);
    double a = 0.0, b = 0.0;
    for (std::size_t i = skip; i + skip < n; ++i) a += double(y.samples(0, i)) * y.samples(0, i), b += double(s.samples(0, i)) * s.samples(0, i);
    return 10.0 * std::log10(a / b);
  };
  const double pass = probe_db(10.0, 20000, 2000), high = probe_db(170.0, 20000, 2000), low = probe_db(0.01, 500000, 50000);
  c.expect(pass >= -1.0, "passband 10 Hz " + fmt("%.2f dB", pass));
  c.expect(high <= -20.0, "stopband 170 Hz " + fmt("%.1f dB", high));
  c.expect(low <= -20.0, "stopband 0.01 Hz " + fmt("%.1f dB", low));

  SynthCorpusOptions o;
  const auto corpus = synth_corpus(o, 11);
  std::vector<WindowedSample> all;
  for (const auto& rec : corpus.recordings) {
    auto ws = extract_windows(resample(bandpass(rec), 400.0), {}, 11);
    all.insert(all.end(), ws.begin(), ws.end());
  }
  attach_annotations(all, corpus.words, WindowParams{}.window_s);
  const auto split = split_dataset(std::move(all), SplitSpec{});
  c.expect(!split.train.empty() && !split.test.empty(), "non-empty splits");
  c.expect(split.audit.shared_sentences == 0, "shared sentences " + std::to_string(split.audit.shared_sentences));
  c.note(fmt("passband %.2f dB", pass) + fmt(", 170 Hz %.1f dB", high) + fmt(", 0.01 Hz %.1f dB", low) +
         ", overlaps " + std::to_string(split.audit.shared_sentences));
}

std::size_t table_edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + (a[i - 1] != b[j - 1]), d[i - 1][j] + 1, d[i][j - 1] + 1});
  return d[a.size()][b.size()];
}

std::vector<std::string> chars(const std::string& s) {
  std::vector<std::string> out;
  for (char ch : s) out.emplace_back(1, ch);
  return out;
}

void metrics(Check& c) {
  for (const char* s : {"The quick brown fox.", "Hello, World!", "a a a a", "naïve café"}) {
    const auto m = evaluate_pairs({{s, {s}}});
    c.expect(m.bleu1_pct == 100.0 && m.rouge1_f_pct == 100.0 && m.cer_pct == 0.0 && m.wer_pct == 0.0,
             std::string("identical: ") + s);
  }
  c.expect(std::abs(bleu1({{"the cat ate", {"the cat sat on the mat"}}}) - 100.0 * (2.0 / 3.0) * std::exp(-1.0)) < 1e-9,
           "BLEU-1 brevity example");
  const auto r = rouge1({{"the cat ate", {"the cat sat on the mat"}}});
  c.expect(std::abs(r.f - 100.0 * 2.0 * (2.0 / 3.0) * (1.0 / 3.0) / 1.0) < 1e-9, "ROUGE-1 F example");

  SplitMix64 rng(77);
  const std::string alphabet = "abc d";
  for (int i = 0; i < 300; ++i) {
    std::string a(rng.below(16), ' '), b(1 + rng.below(16), ' ');
    for (auto& ch : a) ch = alphabet[rng.below(alphabet.size())];
    for (auto& ch : b) ch = alphabet[rng.below(alphabet.size())];
    const double expect_cer = 100.0 * double(table_edit_distance(chars(a), chars(b))) / double(b.size());
    c.expect(std::abs(cer({{a, {b}}}) - expect_cer) < 1e-9, "CER oracle '" + a + "' vs '" + b + "'");
    const auto wb = normalize_words(b);
    if (!wb.empty()) {
      const double expect_wer = 100.0 * double(table_edit_distance(normalize_words(a), wb)) / double(wb.size());
      c.expect(std::abs(wer({{a, {b}}}) - expect_wer) < 1e-9, "WER oracle");
    }
  }
  const double insert_heavy = cer({{"abcdefghijklmnopqrstuvwxyz", {"abcdefghij"}}});
  c.expect(insert_heavy > 152.23, "CER above 100% " + fmt("%.2f", insert_heavy));
  c.note("insertion-heavy CER " + fmt("%.1f%%", insert_heavy));
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = std::string(NEUROTOK_CLI) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return -1;
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  const int status = pclose(p);
  if (output) *output = out;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void end_to_end(Check& c) {
  const auto root = fs::temp_directory_path() / ("neurotok_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  auto q = [](const fs::path& p) { return "'" + p.string() + "'"; };
  const auto t0 = Clock::now();
  const std::string common =
      " --signals " + q(root / "corpus") + " --annotations " + q(root / "corpus" / "words.jsonl") + " --output " + q(root / "run") + " --seed 5";
  std::string out;
  auto step = [&](const std::string& name, const std::string& args) {
    const int code = run_cli(args, &out);
    c.expect(code == 0, name + " exit " + std::to_string(code) + ": " + out.substr(0, 300));
    return code == 0;
  };
  bool ok = step("synth-data", "synth-data --output " + q(root / "corpus") + " --seed 5") &&
            step("preprocess", "preprocess" + common) &&
            step("train-codec", "train-codec --quiet --steps 500" + common) &&
            step("tokenize", "tokenize --checkpoint " + q(root / "run" / "codec.ckpt") + " --input " +
                                 q(list_signals(root / "corpus").front()) + " --output " + q(root / "tokens.txt")) &&
            step("build-dataset", "build-dataset" + common);
  if (ok) {
    const auto records = read_chatml_jsonl(root / "run" / "dataset" / "test.jsonl");
    std::string refs;
    std::size_t n = 0;
    for (const auto& r : records)
      if (r.pair == PairTag::EgToText) refs += r.messages[2].content + "\n", ++n;
    c.expect(n > 0, "test split has eg->text records");
    detail::write_text(root / "refs.txt", refs);
    ok = step("evaluate", "evaluate --predictions " + q(root / "refs.txt") + " --references " + q(root / "refs.txt") +
                              " --output " + q(root / "eval"));
    if (ok) {
      const auto m = nlohmann::json::parse(neurotok::detail::read_text(root / "eval" / "metrics.json"));
      const double bleu = m.at("bleu1_pct").get<double>();
      c.expect(bleu == 100.0, "echo BLEU-1 " + fmt("%.3f", bleu));
      c.note(std::to_string(n) + " echoed test references, BLEU-1 " + fmt("%.1f", bleu));
    }
  }
  const double secs = since(t0);
  c.expect(secs < 900.0, "runtime " + fmt("%.0f s", secs));
  c.note(fmt("%.0f s", secs));
  fs::remove_all(root);
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, void (*)(Check&)>> criteria = {
      {"gradient-suite", gradient_suite}, {"loss-identities", loss_identities}, {"codec-training", training_run},
      {"rvq-suite", rvq_suite},           {"token-format", token_format},       {"preprocessing", preprocessing},
      {"metrics", metrics},               {"end-to-end", end_to_end},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    Check c;
    const auto t0 = Clock::now();
    try {
      fn(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("exception: ") + e.what());
    }
    std::printf("%s %s (%.1f s) %s\n", c.ok() ? "PASS" : "FAIL", name.c_str(), since(t0), c.summary().c_str());
    std::fflush(stdout);
    failed += !c.ok();
  }
  return failed == 0 ? 0 : 1;
}
