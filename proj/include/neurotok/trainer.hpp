#pragma once

// Alternating discriminator / generator training of the codec.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "neurotok/codec.hpp"
#include "neurotok/optim.hpp"
#include "neurotok/parallel.hpp"

namespace neurotok {

struct TrainOptions {
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: worker_count()
  std::optional<std::filesystem::path> loss_csv;
  std::function<void(std::size_t step, const LossReport&)> on_step;
};

struct TrainResult {
  std::vector<LossReport> history;
  bool aborted = false;
  std::string diagnostic;
  double seconds = 0.0;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, LossReport last_finite)
      : Error(what), last_finite_(last_finite) {}
  const LossReport& last_finite() const noexcept { return last_finite_; }

 private:
  LossReport last_finite_;
};

inline std::string loss_csv_header() { return "step,l_t,l_f,l_w,l_d,l_g,l_feat,l_G"; }

inline std::string loss_csv_row(std::size_t step, const LossReport& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", step, r.l_t, r.l_f, r.l_w, r.l_d, r.l_g,
                r.l_feat, r.l_G);
  return buf;
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossReport>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << loss_csv_header() << "\n";
  for (std::size_t i = 0; i < history.size(); ++i) out << loss_csv_row(i + 1, history[i]) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

namespace detail {

template <class T>
void apply_mean_grads(std::deque<ad::Parameter<T>>& params, const std::vector<std::vector<double>>& acc) {
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < acc[i].size(); ++k) params[i].grad[k] = static_cast<T>(acc[i][k]);
}

template <class T>
std::vector<std::vector<double>> zero_acc(const std::deque<ad::Parameter<T>>& params) {
  std::vector<std::vector<double>> acc;
  for (const auto& p : params) acc.emplace_back(p.value.size(), 0.0);
  return acc;
}

template <class T>
bool all_finite(const std::deque<ad::Parameter<T>>& params) {
  for (const auto& p : params)
    for (T v : p.value)
      if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace detail

// Windows must be single-channel and share one length; shorter lengths are
// right-padded to a multiple of the downsampling factor.
template <class T>
TrainResult train_codec(CodecModel<T>& model, std::vector<std::vector<T>> windows, const TrainOptions& opt) {
  const auto& cfg = model.config();
  if (windows.empty()) throw ValidationError("train_codec: dataset is empty");
  for (auto& w : windows) pad_to_multiple(w, cfg.downsample_factor);
  const std::size_t len = windows.front().size();
  for (const auto& w : windows) {
    if (w.size() != len) throw ShapeError("train_codec: all windows must have the same length");
    for (T v : w)
      if (!std::isfinite(static_cast<double>(v))) throw ValidationError("train_codec: non-finite sample in dataset");
  }
  if (len < cfg.stft.max_window())
    throw ValidationError("train_codec: window length " + std::to_string(len) + " is shorter than the largest STFT window");

  const std::size_t threads = opt.threads ? opt.threads : worker_count();
  const std::size_t B = cfg.batch_size;
  SplitMix64 rng(opt.seed);
  SplitMix64 ema_rng = rng.fork(1);
  Adam<T> gen_opt(model.generator_param_ptrs(), {cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2});
  Adam<T> disc_opt(model.discriminator_param_ptrs(), {cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2});
  const EmaOptions ema{cfg.ema_decay, 1e-5, cfg.reseed_window};

  std::optional<std::ofstream> csv;
  if (opt.loss_csv) {
    csv.emplace(*opt.loss_csv, std::ios::trunc);
    if (!*csv) throw IoError("cannot open " + opt.loss_csv->string() + " for writing");
    *csv << loss_csv_header() << "\n";
  }

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  LossReport last_finite;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::vector<std::size_t> batch(B);
    for (auto& b : batch) b = rng.below(windows.size());

    // Overflowing activations surface as non-finite embeddings in the
    // quantiser; treat them like a non-finite loss.
    std::vector<std::unique_ptr<ad::Tape<T>>> tapes(B);
    std::vector<std::unique_ptr<ParamLeaves<T>>> gen_leaves(B);
    std::vector<GeneratorPass<T>> passes(B);
    bool overflow = false;
    try {
      if (step == 0) {
        // Seed the codebooks from encoder outputs of the first batch.
        std::vector<Matrix<T>> zs(B);
        parallel_for(B, threads, [&](std::size_t i) {
          ad::Tape<T> tape;
          ParamLeaves<T> gen(tape, model.generator_params(), Binding::Frozen);
          auto z = model.encode(tape.constant({1, 1, len}, windows[batch[i]]), gen);
          zs[i] = Matrix<T>(z.dim(1), z.dim(2), z.value());
        });
        SplitMix64 init_rng = rng.fork(2);
        init_codebooks_kmeanspp<T>(model.rvq(), zs, init_rng);
      }

      // Generator forward, one tape per sample.
      parallel_for(B, threads, [&](std::size_t i) {
        tapes[i] = std::make_unique<ad::Tape<T>>();
        gen_leaves[i] = std::make_unique<ParamLeaves<T>>(*tapes[i], model.generator_params(), Binding::Detached);
        passes[i] = generator_forward<T>(model, *tapes[i], *gen_leaves[i], windows[batch[i]]);
      });
    } catch (const NonFiniteError&) {
      overflow = true;
    }
    if (overflow) {
      result.aborted = true;
      result.diagnostic = "non-finite embeddings at step " + std::to_string(step + 1) + "; last finite report: " +
                          loss_csv_row(step, last_finite);
      break;
    }

    LossReport rep;
    const double invB = 1.0 / static_cast<double>(B);

    // Discriminator step on detached reconstructions.
    if (cfg.adversarial) {
      std::vector<double> l_d(B);
      std::vector<std::vector<std::vector<double>>> grads(B);
      parallel_for(B, threads, [&](std::size_t i) {
        ad::Tape<T> tape;
        ParamLeaves<T> disc(tape, model.discriminator_params(), Binding::Detached);
        auto real = model.discriminate(tape.constant({1, 1, len}, passes[i].x.value()), disc);
        auto fake = model.discriminate(tape.constant({1, 1, len}, passes[i].x_hat.value()), disc);
        auto loss = tape_loss::discriminator(real, fake);
        tape.backward(loss);
        l_d[i] = static_cast<double>(loss.item());
        grads[i] = detail::zero_acc(model.discriminator_params());
        disc.add_grad_to(grads[i], invB);
      });
      auto acc = detail::zero_acc(model.discriminator_params());
      for (std::size_t i = 0; i < B; ++i) {
        rep.l_d += l_d[i] * invB;
        for (std::size_t p = 0; p < acc.size(); ++p)
          for (std::size_t k = 0; k < acc[p].size(); ++k) acc[p][k] += grads[i][p][k];
      }
      detail::apply_mean_grads(model.discriminator_params(), acc);
      if (std::isfinite(rep.l_d)) disc_opt.step();
    }

    // Generator step against the updated discriminator.
    std::vector<std::vector<std::vector<double>>> grads(B);
    parallel_for(B, threads, [&](std::size_t i) {
      auto& tape = *tapes[i];
      ParamLeaves<T> disc(tape, model.discriminator_params(), Binding::Frozen);
      generator_adversarial<T>(model, disc, passes[i]);
      tape.backward(passes[i].total);
      grads[i] = detail::zero_acc(model.generator_params());
      gen_leaves[i]->add_grad_to(grads[i], invB);
    });
    auto acc = detail::zero_acc(model.generator_params());
    for (std::size_t i = 0; i < B; ++i) {
      const auto& g = passes[i];
      rep.l_t += invB * static_cast<double>(g.l_t.item());
      rep.l_f += invB * static_cast<double>(g.l_f.item());
      rep.l_w += invB * static_cast<double>(g.l_w.item());
      if (g.l_g) rep.l_g += invB * static_cast<double>(g.l_g->item());
      if (g.l_feat) rep.l_feat += invB * static_cast<double>(g.l_feat->item());
      for (std::size_t p = 0; p < acc.size(); ++p)
        for (std::size_t k = 0; k < acc[p].size(); ++k) acc[p][k] += grads[i][p][k];
    }
    rep.l_G = loss_total(rep, cfg.weights);

    if (!rep.finite()) {
      result.aborted = true;
      result.diagnostic = "non-finite loss at step " + std::to_string(step + 1) + "; last finite report: " +
                          loss_csv_row(step, last_finite);
      break;
    }
    detail::apply_mean_grads(model.generator_params(), acc);
    gen_opt.step();
    if (!detail::all_finite(model.generator_params()) || !detail::all_finite(model.discriminator_params())) {
      result.history.push_back(rep);
      if (csv) *csv << loss_csv_row(step + 1, rep) << "\n";
      result.aborted = true;
      result.diagnostic = "non-finite parameters after step " + std::to_string(step + 1) +
                          "; last finite report: " + loss_csv_row(step + 1, rep);
      last_finite = rep;
      break;
    }

    std::vector<QuantizeResult<T>> qs;
    qs.reserve(B);
    for (auto& g : passes) qs.push_back(std::move(g.q));
    update_codebooks_ema<T>(model.rvq(), qs, ema, ema_rng);

    last_finite = rep;
    result.history.push_back(rep);
    if (csv) *csv << loss_csv_row(step + 1, rep) << "\n";
    if (opt.on_step) opt.on_step(step + 1, rep);
  }
  if (csv) {
    csv->flush();
    if (!*csv) throw IoError("write failed: " + opt.loss_csv->string());
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (result.aborted) throw TrainingDiverged(result.diagnostic, last_finite);
  return result;
}

// Mean of `field` over history[first, first + count).
inline double moving_average(const std::vector<LossReport>& history, double LossReport::*field, std::size_t first,
                             std::size_t count) {
  if (first >= history.size()) throw ValidationError("moving_average: window starts past the history");
  const std::size_t end = std::min(history.size(), first + count);
  double acc = 0.0;
  for (std::size_t i = first; i < end; ++i) acc += history[i].*field;
  return acc / static_cast<double>(end - first);
}

}  // namespace neurotok
