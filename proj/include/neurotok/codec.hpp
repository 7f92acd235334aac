#pragma once

// Single-channel neural codec: convolutional encoder, residual quantiser
// bridge, mirrored decoder, a bank of multi-resolution discriminators and
// the reconstruction / adversarial loss suite.

#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurotok/autodiff.hpp"
#include "neurotok/checkpoint.hpp"
#include "neurotok/error.hpp"
#include "neurotok/quantizer.hpp"
#include "neurotok/rng.hpp"
#include "neurotok/spectral.hpp"

namespace neurotok {

struct LossWeights {
  double t = 500.0;
  double f = 9.0;
  double g = 1.0;
  double feat = 1.0;
  double w = 10.0;

  bool operator==(const LossWeights&) const = default;
};

struct CodecConfig {
  std::vector<std::size_t> encoder_strides{4, 5, 5};
  std::size_t downsample_factor = 100;
  std::size_t base_channels = 8;
  std::size_t embed_dim = kDefaultEmbedDim;
  std::size_t codebook_size = kDefaultCodebookSize;
  std::size_t n_q = 1;
  LossWeights weights;
  StftConfig stft = StftConfig::defaults();
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  std::size_t batch_size = 32;
  std::size_t disc_count = 3;
  std::size_t disc_layers = 4;
  std::size_t disc_channels = 4;
  bool adversarial = true;
  double ema_decay = 0.99;
  std::size_t reseed_window = 100;
  bool pin_zero_codeword = true;

  std::size_t stride_product() const {
    return std::accumulate(encoder_strides.begin(), encoder_strides.end(), std::size_t{1}, std::multiplies<>());
  }

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (encoder_strides.empty()) out.push_back("encoder_strides must not be empty");
    for (auto s : encoder_strides)
      if (s == 0) out.push_back("encoder_strides entries must be positive");
    if (!encoder_strides.empty() && stride_product() != downsample_factor)
      out.push_back("product of encoder_strides (" + std::to_string(stride_product()) +
                    ") must equal downsample_factor (" + std::to_string(downsample_factor) + ")");
    if (base_channels == 0) out.push_back("base_channels must be positive");
    if (embed_dim == 0) out.push_back("embed_dim must be positive");
    if (codebook_size == 0) out.push_back("codebook_size must be positive");
    if (n_q == 0 || n_q > 8) out.push_back("n_q must be between 1 and 8");
    for (double w : {weights.t, weights.f, weights.g, weights.feat, weights.w})
      if (!(w >= 0.0) || !std::isfinite(w)) out.push_back("loss weights must be finite and non-negative");
    try {
      stft.validate();
    } catch (const Error& e) {
      out.push_back(std::string("stft: ") + e.what());
    }
    if (!(learning_rate > 0.0)) out.push_back("learning_rate must be positive");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
      out.push_back("adam betas must be in [0, 1)");
    if (batch_size == 0) out.push_back("batch_size must be positive");
    if (disc_count == 0) out.push_back("disc_count must be positive");
    if (disc_layers == 0) out.push_back("disc_layers must be positive");
    if (disc_channels == 0) out.push_back("disc_channels must be positive");
    if (ema_decay < 0.0 || ema_decay >= 1.0) out.push_back("ema_decay must be in [0, 1)");
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid codec config:";
    for (const auto& s : p) msg += "\n  - " + s;
    throw ValidationError(msg);
  }
};

inline void to_json(nlohmann::json& j, const CodecConfig& c) {
  nlohmann::json scales = nlohmann::json::array();
  for (const auto& s : c.stft.scales) scales.push_back({s.window_length, s.hop_length});
  j = {{"encoder_strides", c.encoder_strides},
       {"downsample_factor", c.downsample_factor},
       {"base_channels", c.base_channels},
       {"embed_dim", c.embed_dim},
       {"codebook_size", c.codebook_size},
       {"n_q", c.n_q},
       {"lambda_t", c.weights.t},
       {"lambda_f", c.weights.f},
       {"lambda_g", c.weights.g},
       {"lambda_feat", c.weights.feat},
       {"lambda_w", c.weights.w},
       {"stft_scales", scales},
       {"learning_rate", c.learning_rate},
       {"adam_betas", {c.adam_beta1, c.adam_beta2}},
       {"batch_size", c.batch_size},
       {"disc_count", c.disc_count},
       {"disc_layers", c.disc_layers},
       {"disc_channels", c.disc_channels},
       {"adversarial", c.adversarial},
       {"ema_decay", c.ema_decay},
       {"reseed_window", c.reseed_window},
       {"pin_zero_codeword", c.pin_zero_codeword}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, CodecConfig& c) {
  static const std::vector<std::string> known = {
      "encoder_strides", "downsample_factor", "base_channels", "embed_dim",   "codebook_size", "n_q",
      "lambda_t",        "lambda_f",          "lambda_g",      "lambda_feat", "lambda_w",      "stft_scales",
      "learning_rate",   "adam_betas",        "batch_size",    "disc_count",  "disc_layers",   "disc_channels",
      "adversarial",     "ema_decay",         "reseed_window", "pin_zero_codeword"};
  if (!j.is_object()) throw ValidationError("codec config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ValidationError("unknown codec config key: " + it.key());
  try {
    auto get = [&](const char* key, auto& dst) {
      if (j.contains(key)) j.at(key).get_to(dst);
    };
    get("encoder_strides", c.encoder_strides);
    get("downsample_factor", c.downsample_factor);
    get("base_channels", c.base_channels);
    get("embed_dim", c.embed_dim);
    get("codebook_size", c.codebook_size);
    get("n_q", c.n_q);
    get("lambda_t", c.weights.t);
    get("lambda_f", c.weights.f);
    get("lambda_g", c.weights.g);
    get("lambda_feat", c.weights.feat);
    get("lambda_w", c.weights.w);
    if (j.contains("stft_scales")) {
      c.stft.scales.clear();
      for (const auto& s : j.at("stft_scales"))
        c.stft.scales.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    }
    get("learning_rate", c.learning_rate);
    if (j.contains("adam_betas")) {
      const auto& b = j.at("adam_betas");
      if (!b.is_array() || b.size() != 2) throw ValidationError("adam_betas must be a two-element array");
      c.adam_beta1 = b.at(0).get<double>();
      c.adam_beta2 = b.at(1).get<double>();
    }
    get("batch_size", c.batch_size);
    get("disc_count", c.disc_count);
    get("disc_layers", c.disc_layers);
    get("disc_channels", c.disc_channels);
    get("adversarial", c.adversarial);
    get("ema_decay", c.ema_decay);
    get("reseed_window", c.reseed_window);
    get("pin_zero_codeword", c.pin_zero_codeword);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("codec config: ") + e.what());
  }
}

struct LossReport {
  double l_t = 0.0;
  double l_f = 0.0;
  double l_w = 0.0;
  double l_d = 0.0;
  double l_g = 0.0;
  double l_feat = 0.0;
  double l_G = 0.0;

  bool finite() const {
    for (double v : {l_t, l_f, l_w, l_d, l_g, l_feat, l_G})
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Losses on plain values

inline void require_nonempty_same(std::size_t a, std::size_t b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": size mismatch " + std::to_string(a) + " vs " + std::to_string(b));
  if (a == 0) throw ValidationError(std::string(op) + ": empty input");
}

// Mean absolute difference.
inline double loss_reconstruction(std::span<const double> x, std::span<const double> x_hat) {
  require_nonempty_same(x.size(), x_hat.size(), "loss_reconstruction");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += std::abs(x[i] - x_hat[i]);
  return acc / static_cast<double>(x.size());
}

// Sum over scales of mean |dS| + sqrt(mean dS^2) on STFT magnitudes.
inline double loss_stft(std::span<const double> x, std::span<const double> x_hat, const StftConfig& cfg) {
  require_nonempty_same(x.size(), x_hat.size(), "loss_stft");
  const auto sx = multi_scale_spectra<double>(x, cfg);
  const auto sy = multi_scale_spectra<double>(x_hat, cfg);
  double total = 0.0;
  for (std::size_t s = 0; s < sx.size(); ++s) {
    const auto a = sx[s].magnitude(), b = sy[s].magnitude();
    double l1 = 0.0, l2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a.data()[i] - b.data()[i];
      l1 += std::abs(d);
      l2 += d * d;
    }
    const auto n = static_cast<double>(a.size());
    total += l1 / n + std::sqrt(l2 / n);
  }
  return total;
}

// Hinge loss over K discriminator logits.
inline double loss_discriminator(std::span<const double> logits_real, std::span<const double> logits_fake) {
  require_nonempty_same(logits_real.size(), logits_fake.size(), "loss_discriminator");
  double acc = 0.0;
  for (std::size_t k = 0; k < logits_real.size(); ++k)
    acc += std::max(0.0, 1.0 - logits_real[k]) + std::max(0.0, 1.0 + logits_fake[k]);
  return acc / static_cast<double>(logits_real.size());
}

inline double loss_generator_adv(std::span<const double> logits_fake) {
  if (logits_fake.empty()) throw ValidationError("loss_generator_adv: empty input");
  double acc = 0.0;
  for (double d : logits_fake) acc += std::max(1.0 - d, 0.0);
  return acc / static_cast<double>(logits_fake.size());
}

inline constexpr double kFeatureMatchEpsilon = 1e-8;

using FeatureSet = std::vector<std::vector<std::vector<double>>>;  // [K][L][elements]

// (1/(K L)) sum_k sum_l |real - fake|_1 / (mean|real| + eps).
inline double loss_feature_match(const FeatureSet& real, const FeatureSet& fake) {
  if (real.size() != fake.size()) throw ShapeError("loss_feature_match: discriminator count mismatch");
  if (real.empty()) throw ValidationError("loss_feature_match: empty input");
  double acc = 0.0;
  std::size_t maps = 0;
  for (std::size_t k = 0; k < real.size(); ++k) {
    if (real[k].size() != fake[k].size()) throw ShapeError("loss_feature_match: layer count mismatch");
    for (std::size_t l = 0; l < real[k].size(); ++l) {
      const auto& a = real[k][l];
      const auto& b = fake[k][l];
      require_nonempty_same(a.size(), b.size(), "loss_feature_match");
      double diff = 0.0, mag = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        diff += std::abs(a[i] - b[i]);
        mag += std::abs(a[i]);
      }
      acc += diff / (mag / static_cast<double>(a.size()) + kFeatureMatchEpsilon);
      ++maps;
    }
  }
  if (maps == 0) throw ValidationError("loss_feature_match: no feature maps");
  return acc / static_cast<double>(maps);
}

inline double loss_total(const LossReport& r, const LossWeights& w) {
  return w.t * r.l_t + w.f * r.l_f + w.g * r.l_g + w.feat * r.l_feat + w.w * r.l_w;
}

// ---------------------------------------------------------------------------
// Model

// How a forward pass places parameters on a tape.
enum class Binding {
  Accumulate,  // leaves linked to the Parameter; backward adds into Parameter::grad
  Detached,    // differentiable leaves not linked; read gradients with ParamLeaves::grad
  Frozen,      // constants
};

template <class T>
class ParamLeaves {
 public:
  ParamLeaves(ad::Tape<T>& tape, std::deque<ad::Parameter<T>>& params, Binding mode)
      : tape_(&tape), params_(&params), mode_(mode), leaves_(params.size()) {}

  ad::Tensor<T> operator()(std::size_t i) {
    auto& slot = leaves_.at(i);
    if (!slot) {
      auto& p = (*params_)[i];
      switch (mode_) {
        case Binding::Accumulate: slot = tape_->parameter(p, true); break;
        case Binding::Detached: slot = tape_->input(p.shape, p.value, true); break;
        case Binding::Frozen: slot = tape_->constant(p.shape, p.value); break;
      }
    }
    return *slot;
  }

  // Gradient of leaf i after backward (zeros if unused).
  void add_grad_to(std::vector<std::vector<double>>& acc, double scale) const {
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (!leaves_[i]) continue;
      const auto& g = leaves_[i]->grad();
      if (g.empty()) continue;
      for (std::size_t k = 0; k < g.size(); ++k) acc[i][k] += scale * static_cast<double>(g[k]);
    }
  }

 private:
  ad::Tape<T>* tape_;
  std::deque<ad::Parameter<T>>* params_;
  Binding mode_;
  std::vector<std::optional<ad::Tensor<T>>> leaves_;
};

struct ConvLayer {
  std::size_t weight = 0, bias = 0;
  std::size_t stride = 1, padding = 0;
  bool transpose = false;
};

// Forward program: a flat list of steps over one running activation.
struct Step {
  enum Kind { Conv, Elu, SkipPush, SkipAdd, Feature };
  Kind kind;
  ConvLayer conv{};
};

template <class T>
struct DiscOutput {
  std::vector<ad::Tensor<T>> logits;                 // [K] scalars
  std::vector<std::vector<ad::Tensor<T>>> features;  // [K][L]
};

template <class T>
class CodecModel {
 public:
  CodecModel(CodecConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
    SplitMix64 rng(seed);
    init_params(gen_, rng);
    init_params(disc_, rng);
    rvq_ = RvqState<T>(cfg_.n_q, cfg_.codebook_size, cfg_.embed_dim);
    rvq_.pin_zero_codeword = cfg_.pin_zero_codeword;
    for (auto& book : rvq_.stages)
      for (auto& v : book.entries.data()) v = static_cast<T>(rng.normal());
  }

  const CodecConfig& config() const noexcept { return cfg_; }
  std::deque<ad::Parameter<T>>& generator_params() noexcept { return gen_; }
  std::deque<ad::Parameter<T>>& discriminator_params() noexcept { return disc_; }
  const std::deque<ad::Parameter<T>>& generator_params() const noexcept { return gen_; }
  const std::deque<ad::Parameter<T>>& discriminator_params() const noexcept { return disc_; }
  RvqState<T>& rvq() noexcept { return rvq_; }
  const RvqState<T>& rvq() const noexcept { return rvq_; }

  std::vector<ad::Parameter<T>*> generator_param_ptrs() { return ptrs(gen_); }
  std::vector<ad::Parameter<T>*> discriminator_param_ptrs() { return ptrs(disc_); }

  // x: [B, 1, T] with T divisible by the downsampling factor -> [B, R, T/factor].
  ad::Tensor<T> encode(const ad::Tensor<T>& x, ParamLeaves<T>& p) const {
    if (x.shape().size() != 3 || x.dim(1) != 1) throw ShapeError("encode expects [B, 1, T], got " + ad::shape_str(x.shape()));
    if (x.dim(2) % cfg_.downsample_factor != 0)
      throw ShapeError("encode: length " + std::to_string(x.dim(2)) + " is not divisible by " +
                       std::to_string(cfg_.downsample_factor));
    return run(encoder_, x, p, nullptr);
  }

  ad::Tensor<T> decode(const ad::Tensor<T>& z_q, ParamLeaves<T>& p) const {
    if (z_q.shape().size() != 3 || z_q.dim(1) != cfg_.embed_dim)
      throw ShapeError("decode expects [B, " + std::to_string(cfg_.embed_dim) + ", T_E], got " +
                       ad::shape_str(z_q.shape()));
    return run(decoder_, z_q, p, nullptr);
  }

  DiscOutput<T> discriminate(const ad::Tensor<T>& x, ParamLeaves<T>& p) const {
    DiscOutput<T> out;
    for (std::size_t k = 0; k < discs_.size(); ++k) {
      auto input = k == 0 ? x : ad::avg_pool1d(x, std::size_t{1} << k);
      std::vector<ad::Tensor<T>> feats;
      auto y = run(discs_[k], input, p, &feats);
      out.logits.push_back(ad::mean(y));
      out.features.push_back(std::move(feats));
    }
    return out;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.config = cfg_;
    for (const auto& p : gen_) ck.add(p.name, p.shape, p.value);
    for (const auto& p : disc_) ck.add(p.name, p.shape, p.value);
    for (std::size_t s = 0; s < rvq_.num_stages(); ++s) {
      const auto& e = rvq_.stages[s].entries;
      ck.add("rvq.stage" + std::to_string(s) + ".entries", {e.rows(), e.cols()}, e.data());
    }
    return ck;
  }

  static CodecModel from_checkpoint(const Checkpoint& ck) {
    CodecConfig cfg;
    from_json(ck.config, cfg);
    CodecModel m(cfg, 0);
    auto load = [&](ad::Parameter<T>& p) {
      const auto& t = ck.at(p.name);
      if (t.shape != p.shape)
        throw ShapeError("checkpoint tensor " + p.name + " has shape " + ad::shape_str(t.shape) + ", expected " +
                         ad::shape_str(p.shape));
      for (std::size_t i = 0; i < t.data.size(); ++i) p.value[i] = static_cast<T>(t.data[i]);
    };
    for (auto& p : m.gen_) load(p);
    for (auto& p : m.disc_) load(p);
    for (std::size_t s = 0; s < m.rvq_.num_stages(); ++s) {
      auto& e = m.rvq_.stages[s].entries;
      const auto& t = ck.at("rvq.stage" + std::to_string(s) + ".entries");
      if (t.shape != std::vector<std::size_t>{e.rows(), e.cols()})
        throw ShapeError("checkpoint codebook " + std::to_string(s) + " has the wrong shape");
      for (std::size_t i = 0; i < t.data.size(); ++i) e.data()[i] = static_cast<T>(t.data[i]);
    }
    return m;
  }

 private:
  static std::vector<ad::Parameter<T>*> ptrs(std::deque<ad::Parameter<T>>& ps) {
    std::vector<ad::Parameter<T>*> out;
    for (auto& p : ps) out.push_back(&p);
    return out;
  }

  static ConvLayer add_conv(std::deque<ad::Parameter<T>>& ps, const std::string& name, std::size_t cin,
                            std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad, bool transpose) {
    ConvLayer c;
    c.weight = ps.size();
    ps.emplace_back(name + ".weight", transpose ? ad::Shape{cin, cout, k} : ad::Shape{cout, cin, k});
    c.bias = ps.size();
    ps.emplace_back(name + ".bias", ad::Shape{cout});
    c.stride = stride;
    c.padding = pad;
    c.transpose = transpose;
    return c;
  }

  void build() {
    const std::size_t C = cfg_.base_channels, R = cfg_.embed_dim;
    std::size_t idx = 0;
    auto conv = [&](std::vector<Step>& prog, const std::string& prefix, std::size_t cin, std::size_t cout,
                    std::size_t k, std::size_t stride, std::size_t pad, bool transpose = false) {
      prog.push_back({Step::Conv, add_conv(gen_, prefix + ".conv" + std::to_string(idx++), cin, cout, k, stride, pad,
                                           transpose)});
    };
    auto residual = [&](std::vector<Step>& prog, const std::string& prefix, std::size_t ch) {
      prog.push_back({Step::SkipPush});
      prog.push_back({Step::Elu});
      conv(prog, prefix, ch, ch, 3, 1, 1);
      prog.push_back({Step::Elu});
      conv(prog, prefix, ch, ch, 3, 1, 1);
      prog.push_back({Step::SkipAdd});
    };

    std::size_t ch = C;
    conv(encoder_, "encoder", 1, C, 7, 1, 3);
    for (std::size_t s : cfg_.encoder_strides) {
      residual(encoder_, "encoder", ch);
      encoder_.push_back({Step::Elu});
      conv(encoder_, "encoder", ch, 2 * ch, 2 * s, s, (s + 1) / 2);
      ch *= 2;
    }
    encoder_.push_back({Step::Elu});
    conv(encoder_, "encoder", ch, R, 3, 1, 1);

    idx = 0;
    conv(decoder_, "decoder", R, ch, 3, 1, 1);
    for (auto it = cfg_.encoder_strides.rbegin(); it != cfg_.encoder_strides.rend(); ++it) {
      const std::size_t s = *it, pad = (s + 1) / 2;
      decoder_.push_back({Step::Elu});
      conv(decoder_, "decoder", ch, ch / 2, s + 2 * pad, s, pad, true);
      ch /= 2;
      residual(decoder_, "decoder", ch);
    }
    decoder_.push_back({Step::Elu});
    conv(decoder_, "decoder", C, 1, 7, 1, 3);

    for (std::size_t k = 0; k < cfg_.disc_count; ++k) {
      std::vector<Step> prog;
      const std::string prefix = "disc" + std::to_string(k);
      std::size_t cin = 1;
      for (std::size_t l = 0; l < cfg_.disc_layers; ++l) {
        const std::size_t cout = cfg_.disc_channels << std::min<std::size_t>(l, 2);
        prog.push_back({Step::Conv, add_conv(disc_, prefix + ".conv" + std::to_string(l), cin, cout, 5, 2, 2, false)});
        prog.push_back({Step::Elu});
        prog.push_back({Step::Feature});
        cin = cout;
      }
      prog.push_back(
          {Step::Conv, add_conv(disc_, prefix + ".conv" + std::to_string(cfg_.disc_layers), cin, 1, 3, 1, 1, false)});
      discs_.push_back(std::move(prog));
    }
  }

  // Weights uniform in +-1/sqrt(shape[1] * K), the usual framework default
  // for both conv layouts; biases zero.
  static void init_params(std::deque<ad::Parameter<T>>& ps, SplitMix64& rng) {
    for (std::size_t i = 0; i + 1 < ps.size(); i += 2) {
      auto& w = ps[i];
      const double fan_in = static_cast<double>(w.shape[1] * w.shape[2]);
      const double bound = 1.0 / std::sqrt(fan_in);
      for (auto& v : w.value) v = static_cast<T>(rng.uniform(-bound, bound));
    }
  }

  ad::Tensor<T> run(const std::vector<Step>& prog, ad::Tensor<T> h, ParamLeaves<T>& p,
                    std::vector<ad::Tensor<T>>* features) const {
    std::vector<ad::Tensor<T>> skips;
    for (const auto& st : prog) {
      switch (st.kind) {
        case Step::Conv:
          h = st.conv.transpose
                  ? ad::conv_transpose1d(h, p(st.conv.weight), p(st.conv.bias), st.conv.stride, st.conv.padding)
                  : ad::conv1d(h, p(st.conv.weight), p(st.conv.bias), st.conv.stride, st.conv.padding);
          break;
        case Step::Elu: h = ad::elu(h); break;
        case Step::SkipPush: skips.push_back(h); break;
        case Step::SkipAdd:
          h = ad::add(h, skips.back());
          skips.pop_back();
          break;
        case Step::Feature:
          if (features) features->push_back(h);
          break;
      }
    }
    return h;
  }

  CodecConfig cfg_;
  std::deque<ad::Parameter<T>> gen_, disc_;
  std::vector<Step> encoder_, decoder_;
  std::vector<std::vector<Step>> discs_;
  RvqState<T> rvq_;
};

// ---------------------------------------------------------------------------
// Losses on a tape

namespace tape_loss {

template <class T>
ad::Tensor<T> reconstruction(const ad::Tensor<T>& x, const ad::Tensor<T>& x_hat) {
  return ad::mean(ad::abs(ad::sub(x_hat, x)));
}

template <class T>
ad::Tensor<T> stft(const ad::Tensor<T>& x, const ad::Tensor<T>& x_hat, const StftConfig& cfg) {
  std::optional<ad::Tensor<T>> total;
  for (const auto& scale : cfg.scales) {
    auto d = ad::sub(ad::dft_magnitude(x, scale), ad::dft_magnitude(x_hat, scale));
    const T inv = T{1} / static_cast<T>(d.size());
    auto term = ad::add(ad::mean(ad::abs(d)), ad::sqrt(ad::mul_scalar(ad::l2sq(d), inv)));
    total = total ? ad::add(*total, term) : term;
  }
  if (!total) throw ValidationError("loss_stft: no scales configured");
  return *total;
}

// Sum over stages of mean((z - C_i)^2) where C_i is the running sum of the
// first i selected codewords; gradient reaches z only.
template <class T>
ad::Tensor<T> commitment(const ad::Tensor<T>& z, const QuantizeResult<T>& q) {
  auto& tape = z.tape();
  std::vector<T> cum(z.size(), T{});
  std::optional<ad::Tensor<T>> total;
  const std::size_t R = q.quantized.rows(), TE = q.quantized.cols();
  for (const auto& chosen : q.stage_outputs) {
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t t = 0; t < TE; ++t) cum[r * TE + t] += chosen(r, t);
    auto d = ad::sub(z, tape.constant(z.shape(), cum));
    auto term = ad::mul_scalar(ad::l2sq(d), T{1} / static_cast<T>(d.size()));
    total = total ? ad::add(*total, term) : term;
  }
  return *total;
}

template <class T>
ad::Tensor<T> discriminator(const DiscOutput<T>& real, const DiscOutput<T>& fake) {
  const std::size_t K = real.logits.size();
  std::optional<ad::Tensor<T>> total;
  for (std::size_t k = 0; k < K; ++k) {
    auto a = ad::relu(ad::add_scalar(ad::mul_scalar(real.logits[k], T{-1}), T{1}));
    auto b = ad::relu(ad::add_scalar(fake.logits[k], T{1}));
    auto term = ad::add(a, b);
    total = total ? ad::add(*total, term) : term;
  }
  return ad::mul_scalar(*total, T{1} / static_cast<T>(K));
}

template <class T>
ad::Tensor<T> generator_adv(const DiscOutput<T>& fake) {
  const std::size_t K = fake.logits.size();
  std::optional<ad::Tensor<T>> total;
  for (std::size_t k = 0; k < K; ++k) {
    auto term = ad::relu(ad::add_scalar(ad::mul_scalar(fake.logits[k], T{-1}), T{1}));
    total = total ? ad::add(*total, term) : term;
  }
  return ad::mul_scalar(*total, T{1} / static_cast<T>(K));
}

// Real features are treated as constants.
template <class T>
ad::Tensor<T> feature_match(const DiscOutput<T>& real, const DiscOutput<T>& fake) {
  std::optional<ad::Tensor<T>> total;
  std::size_t maps = 0;
  for (std::size_t k = 0; k < real.features.size(); ++k)
    for (std::size_t l = 0; l < real.features[k].size(); ++l) {
      const auto& r = real.features[k][l];
      auto& tape = fake.features[k][l].tape();
      double mag = 0.0;
      for (T v : r.value()) mag += std::abs(static_cast<double>(v));
      mag /= static_cast<double>(r.size());
      auto diff = ad::l1(ad::sub(tape.constant(r.shape(), r.value()), fake.features[k][l]));
      auto term = ad::mul_scalar(diff, static_cast<T>(1.0 / (mag + kFeatureMatchEpsilon)));
      total = total ? ad::add(*total, term) : term;
      ++maps;
    }
  return ad::mul_scalar(*total, T{1} / static_cast<T>(maps));
}

}  // namespace tape_loss

// ---------------------------------------------------------------------------
// One sample through the generator

template <class T>
struct GeneratorPass {
  ad::Tensor<T> x, z, z_q, x_hat;
  QuantizeResult<T> q;
  ad::Tensor<T> l_t, l_f, l_w;
  std::optional<ad::Tensor<T>> l_g, l_feat;
  ad::Tensor<T> total;
};

// Quantiser bridge: either quantise z now, or reuse a frozen offset
// delta = z_q - z and frozen codeword choices (used for finite differences,
// where the straight-through estimator is otherwise not a derivative).
template <class T>
struct FrozenQuantization {
  QuantizeResult<T> q;
  std::vector<T> offset;
};

template <class T>
GeneratorPass<T> generator_forward(const CodecModel<T>& model, ad::Tape<T>& tape, ParamLeaves<T>& gen,
                                   std::span<const T> signal, const FrozenQuantization<T>* frozen = nullptr) {
  const auto& cfg = model.config();
  GeneratorPass<T> g;
  g.x = tape.constant({1, 1, signal.size()}, std::vector<T>(signal.begin(), signal.end()));
  g.z = model.encode(g.x, gen);
  const std::size_t R = g.z.dim(1), TE = g.z.dim(2);
  if (frozen) {
    g.q = frozen->q;
    g.z_q = ad::add(g.z, tape.constant(g.z.shape(), frozen->offset));
  } else {
    g.q = quantize(Matrix<T>(R, TE, g.z.value()), model.rvq());
    g.z_q = ad::straight_through<T>(g.z, g.q.quantized.data());
  }
  g.x_hat = model.decode(g.z_q, gen);
  g.l_t = tape_loss::reconstruction(g.x, g.x_hat);
  g.l_f = tape_loss::stft(g.x, g.x_hat, cfg.stft);
  g.l_w = tape_loss::commitment(g.z, g.q);
  return g;
}

// Adds the adversarial terms (discriminator parameters bound by `disc`) and
// forms the weighted total.
template <class T>
void generator_adversarial(const CodecModel<T>& model, ParamLeaves<T>& disc, GeneratorPass<T>& g) {
  const auto& w = model.config().weights;
  auto total = ad::add(ad::mul_scalar(g.l_t, static_cast<T>(w.t)), ad::mul_scalar(g.l_f, static_cast<T>(w.f)));
  total = ad::add(total, ad::mul_scalar(g.l_w, static_cast<T>(w.w)));
  if (model.config().adversarial) {
    auto real = model.discriminate(g.x, disc);
    auto fake = model.discriminate(g.x_hat, disc);
    g.l_g = tape_loss::generator_adv(fake);
    g.l_feat = tape_loss::feature_match(real, fake);
    total = ad::add(total, ad::mul_scalar(*g.l_g, static_cast<T>(w.g)));
    total = ad::add(total, ad::mul_scalar(*g.l_feat, static_cast<T>(w.feat)));
  }
  g.total = total;
}

template <class T>
FrozenQuantization<T> freeze_quantization(const GeneratorPass<T>& g) {
  FrozenQuantization<T> f{g.q, {}};
  const auto& zv = g.z.value();
  f.offset.resize(zv.size());
  for (std::size_t i = 0; i < zv.size(); ++i) f.offset[i] = g.q.quantized.data()[i] - zv[i];
  return f;
}

// ---------------------------------------------------------------------------
// Inference helpers on a frozen model

// Right-pads with zeros to a multiple of `factor`; returns the pad length.
template <class T>
std::size_t pad_to_multiple(std::vector<T>& x, std::size_t factor) {
  const std::size_t rem = x.size() % factor;
  if (rem == 0 && !x.empty()) return 0;
  const std::size_t pad = x.empty() ? factor : factor - rem;
  x.resize(x.size() + pad, T{});
  return pad;
}

// Codes [N_q, T_E] for one channel whose length is a multiple of the
// downsampling factor.
template <class T>
Matrix<int> encode_codes(const CodecModel<T>& model, std::span<const T> signal) {
  ad::Tape<T> tape;
  auto& params = const_cast<CodecModel<T>&>(model).generator_params();
  ParamLeaves<T> leaves(tape, params, Binding::Frozen);
  auto x = tape.constant({1, 1, signal.size()}, std::vector<T>(signal.begin(), signal.end()));
  auto z = model.encode(x, leaves);
  return quantize(Matrix<T>(z.dim(1), z.dim(2), z.value()), model.rvq()).codes;
}

template <class T>
std::vector<T> decode_codes(const CodecModel<T>& model, const Matrix<int>& codes) {
  const auto zq = dequantize(codes, model.rvq());
  ad::Tape<T> tape;
  auto& params = const_cast<CodecModel<T>&>(model).generator_params();
  ParamLeaves<T> leaves(tape, params, Binding::Frozen);
  auto x_hat = model.decode(tape.constant({1, zq.rows(), zq.cols()}, zq.data()), leaves);
  return x_hat.value();
}

template <class T>
std::vector<T> reconstruct(const CodecModel<T>& model, std::span<const T> signal) {
  return decode_codes(model, encode_codes(model, signal));
}

}  // namespace neurotok
