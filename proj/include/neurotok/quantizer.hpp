#pragma once

// Residual vector quantisation. Stage i snaps the residual left by stages
// < i to its nearest codeword; codebooks learn by exponential moving
// averages rather than by gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "neurotok/error.hpp"
#include "neurotok/matrix.hpp"
#include "neurotok/rng.hpp"

namespace neurotok {

inline constexpr std::size_t kDefaultCodebookSize = 8192;
inline constexpr std::size_t kDefaultEmbedDim = 32;

template <class T>
struct Codebook {
  Matrix<T> entries;                        // [V, R]
  std::vector<std::uint64_t> usage_counts;  // assignments since the last re-seed check
  std::vector<double> ema_cluster_size;     // [V]
  Matrix<double> ema_embed_sum;             // [V, R]

  Codebook() = default;
  Codebook(std::size_t size, std::size_t dim)
      : entries(size, dim), usage_counts(size, 0), ema_cluster_size(size, 0.0), ema_embed_sum(size, dim) {}

  std::size_t size() const noexcept { return entries.rows(); }
  std::size_t dim() const noexcept { return entries.cols(); }

  // Index of the codeword closest (Euclidean) to `v`; ties go to the lowest index.
  std::size_t nearest(std::span<const T> v) const {
    std::size_t best = 0;
    T best_d = std::numeric_limits<T>::infinity();
    const std::size_t R = dim();
    for (std::size_t k = 0; k < size(); ++k) {
      const T d = squared_distance(v.data(), entries.data().data() + k * R, R);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    return best;
  }

  // Eight independent partial sums so the loop vectorises.
  static T squared_distance(const T* a, const T* b, std::size_t n) {
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
      for (std::size_t u = 0; u < 8; ++u) {
        const T d = a[i + u] - b[i + u];
        acc[u] += d * d;
      }
    T tail{};
    for (; i < n; ++i) tail += (a[i] - b[i]) * (a[i] - b[i]);
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
  }
};

template <class T>
struct RvqState {
  std::vector<Codebook<T>> stages;
  std::size_t steps_since_reseed = 0;
  // Keep codeword 0 of every stage at the origin. With it, no stage can
  // increase the residual norm.
  bool pin_zero_codeword = true;

  RvqState() = default;
  RvqState(std::size_t num_stages, std::size_t codebook_size, std::size_t dim) {
    if (num_stages == 0) throw ValidationError("RVQ needs at least one stage");
    if (codebook_size == 0 || dim == 0) throw ValidationError("codebook size and dimension must be positive");
    stages.assign(num_stages, Codebook<T>(codebook_size, dim));
  }

  std::size_t num_stages() const noexcept { return stages.size(); }
  std::size_t codebook_size() const noexcept { return stages.empty() ? 0 : stages.front().size(); }
  std::size_t dim() const noexcept { return stages.empty() ? 0 : stages.front().dim(); }
};

// Codes [N_q, T_E], the summed reconstruction [R, T_E], and for each stage
// the residual it received and the codewords it chose (both [R, T_E]).
template <class T>
struct QuantizeResult {
  Matrix<int> codes;
  Matrix<T> quantized;
  std::vector<Matrix<T>> stage_inputs;
  std::vector<Matrix<T>> stage_outputs;
};

template <class T>
QuantizeResult<T> quantize(const Matrix<T>& z, const RvqState<T>& state) {
  const std::size_t R = z.rows(), TE = z.cols();
  if (state.num_stages() == 0) throw ValidationError("RVQ state has no stages");
  if (R != state.dim())
    throw ShapeError("quantize: embedding dim " + std::to_string(R) + " does not match codebook dim " +
                     std::to_string(state.dim()));
  for (T v : z.data())
    if (!std::isfinite(static_cast<double>(v))) throw NonFiniteError("quantize: non-finite embedding");

  QuantizeResult<T> out;
  out.codes = Matrix<int>(state.num_stages(), TE);
  out.quantized = Matrix<T>(R, TE);
  Matrix<T> residual = z;
  // Columns laid out contiguously; each codeword is then scanned once against
  // every column while it is hot in cache.
  std::vector<T> columns(TE * R);
  std::vector<T> best_d(TE);
  std::vector<std::size_t> best_k(TE);
  for (std::size_t s = 0; s < state.num_stages(); ++s) {
    const auto& book = state.stages[s];
    for (std::size_t t = 0; t < TE; ++t)
      for (std::size_t r = 0; r < R; ++r) columns[t * R + r] = residual(r, t);
    std::fill(best_d.begin(), best_d.end(), std::numeric_limits<T>::infinity());
    std::fill(best_k.begin(), best_k.end(), std::size_t{0});
    for (std::size_t k = 0; k < book.size(); ++k) {
      const T* c = book.entries.data().data() + k * R;
      for (std::size_t t = 0; t < TE; ++t) {
        const T d = Codebook<T>::squared_distance(columns.data() + t * R, c, R);
        if (d < best_d[t]) {
          best_d[t] = d;
          best_k[t] = k;
        }
      }
    }
    Matrix<T> chosen(R, TE);
    for (std::size_t t = 0; t < TE; ++t) {
      const std::size_t k = best_k[t];
      out.codes(s, t) = static_cast<int>(k);
      for (std::size_t r = 0; r < R; ++r) chosen(r, t) = book.entries(k, r);
    }
    out.stage_inputs.push_back(residual);
    for (std::size_t i = 0; i < residual.size(); ++i) {
      residual.data()[i] -= chosen.data()[i];
      out.quantized.data()[i] += chosen.data()[i];
    }
    out.stage_outputs.push_back(std::move(chosen));
  }
  return out;
}

template <class T>
Matrix<T> dequantize(const Matrix<int>& codes, const RvqState<T>& state) {
  if (codes.rows() == 0 || codes.rows() > state.num_stages())
    throw ShapeError("dequantize: code rows must be between 1 and the number of stages");
  const std::size_t R = state.dim(), TE = codes.cols();
  Matrix<T> out(R, TE);
  for (std::size_t s = 0; s < codes.rows(); ++s) {
    const auto& book = state.stages[s];
    for (std::size_t t = 0; t < TE; ++t) {
      const int k = codes(s, t);
      if (k < 0 || static_cast<std::size_t>(k) >= book.size())
        throw ValidationError("code " + std::to_string(k) + " out of range for codebook of size " +
                              std::to_string(book.size()));
      for (std::size_t r = 0; r < R; ++r) out(r, t) += book.entries(static_cast<std::size_t>(k), r);
    }
  }
  return out;
}

// Sum over stages of the mean squared distance between each stage's input
// residual and the codeword it selected.
template <class T>
double commitment_loss(std::span<const Matrix<T>> residuals, std::span<const Matrix<T>> quantized) {
  if (residuals.size() != quantized.size()) throw ShapeError("commitment_loss: stage count mismatch");
  double total = 0.0;
  for (std::size_t s = 0; s < residuals.size(); ++s) {
    const auto& a = residuals[s];
    const auto& b = quantized[s];
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("commitment_loss: shape mismatch");
    if (a.empty()) continue;
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
      acc += d * d;
    }
    total += acc / static_cast<double>(a.size());
  }
  return total;
}

struct EmaOptions {
  double decay = 0.99;
  double epsilon = 1e-5;
  // Number of updates between dead-codeword checks; 0 disables re-seeding.
  std::size_t reseed_window = 100;
};

// One EMA step over a batch of quantize() results.
//
// Per codeword: size <- decay*size + (1-decay)*count and
// sum <- decay*sum + (1-decay)*sum_of_inputs; the entry becomes
// sum / max(size, eps). Entries whose size has decayed below eps keep their
// value. Every `reseed_window` updates, codewords whose share of the
// assignments in that window is below 1/(2V) are replaced by random inputs
// from the current batch and their usage statistics reset.
template <class T>
void update_codebooks_ema(RvqState<T>& state, std::span<const QuantizeResult<T>> batch, const EmaOptions& opt,
                          SplitMix64& rng) {
  if (opt.decay < 0.0 || opt.decay >= 1.0) throw ValidationError("EMA decay must be in [0, 1)");
  if (batch.empty()) return;
  const std::size_t R = state.dim();
  for (std::size_t s = 0; s < state.num_stages(); ++s) {
    auto& book = state.stages[s];
    const std::size_t V = book.size();
    std::vector<double> counts(V, 0.0);
    Matrix<double> sums(V, R);
    for (const auto& res : batch) {
      if (res.stage_inputs.size() != state.num_stages() || res.codes.rows() != state.num_stages())
        throw ShapeError("update_codebooks_ema: batch entry has the wrong number of stages");
      const auto& in = res.stage_inputs[s];
      for (std::size_t t = 0; t < in.cols(); ++t) {
        const auto k = static_cast<std::size_t>(res.codes(s, t));
        counts[k] += 1.0;
        book.usage_counts[k] += 1;
        for (std::size_t r = 0; r < R; ++r) sums(k, r) += static_cast<double>(in(r, t));
      }
    }
    for (std::size_t k = state.pin_zero_codeword ? 1 : 0; k < V; ++k) {
      book.ema_cluster_size[k] = opt.decay * book.ema_cluster_size[k] + (1.0 - opt.decay) * counts[k];
      for (std::size_t r = 0; r < R; ++r)
        book.ema_embed_sum(k, r) = opt.decay * book.ema_embed_sum(k, r) + (1.0 - opt.decay) * sums(k, r);
      const double size = book.ema_cluster_size[k];
      if (size < opt.epsilon) continue;
      const double denom = std::max(size, opt.epsilon);
      for (std::size_t r = 0; r < R; ++r) book.entries(k, r) = static_cast<T>(book.ema_embed_sum(k, r) / denom);
    }
  }

  state.steps_since_reseed += 1;
  if (opt.reseed_window == 0 || state.steps_since_reseed < opt.reseed_window) return;
  state.steps_since_reseed = 0;
  for (std::size_t s = 0; s < state.num_stages(); ++s) {
    auto& book = state.stages[s];
    const std::size_t V = book.size();
    std::uint64_t total = 0;
    for (auto c : book.usage_counts) total += c;
    // Candidate replacements: every input vector this stage saw in the batch.
    std::vector<std::pair<std::size_t, std::size_t>> pool;
    for (std::size_t b = 0; b < batch.size(); ++b)
      for (std::size_t t = 0; t < batch[b].stage_inputs[s].cols(); ++t) pool.emplace_back(b, t);
    const double threshold = 1.0 / (2.0 * static_cast<double>(V));
    for (std::size_t k = state.pin_zero_codeword ? 1 : 0; k < V; ++k) {
      const double share = total == 0 ? 0.0 : static_cast<double>(book.usage_counts[k]) / static_cast<double>(total);
      if (share >= threshold || pool.empty()) continue;
      const auto [b, t] = pool[rng.below(pool.size())];
      const auto& in = batch[b].stage_inputs[s];
      for (std::size_t r = 0; r < R; ++r) {
        book.entries(k, r) = in(r, t);
        book.ema_embed_sum(k, r) = static_cast<double>(in(r, t));
      }
      book.ema_cluster_size[k] = 1.0;
    }
    std::fill(book.usage_counts.begin(), book.usage_counts.end(), 0);
  }
}

// k-means++ seeding of every stage from a set of embedding columns
// ([R, n] matrices). When fewer distinct vectors than codewords are
// available, the remaining entries are random data vectors plus small
// Gaussian jitter.
template <class T>
void init_codebooks_kmeanspp(RvqState<T>& state, std::span<const Matrix<T>> batch, SplitMix64& rng) {
  const std::size_t R = state.dim();
  std::vector<std::vector<double>> points;
  for (const auto& m : batch) {
    if (m.rows() != R) throw ShapeError("init_codebooks_kmeanspp: embedding dim mismatch");
    for (std::size_t t = 0; t < m.cols(); ++t) {
      std::vector<double> p(R);
      for (std::size_t r = 0; r < R; ++r) p[r] = static_cast<double>(m(r, t));
      points.push_back(std::move(p));
    }
  }
  if (points.empty()) throw ValidationError("init_codebooks_kmeanspp: no data");

  auto sq = [R](const std::vector<double>& a, const T* b) {
    double d = 0.0;
    for (std::size_t r = 0; r < R; ++r) {
      const double diff = a[r] - static_cast<double>(b[r]);
      d += diff * diff;
    }
    return d;
  };

  for (std::size_t s = 0; s < state.num_stages(); ++s) {
    auto& book = state.stages[s];
    const std::size_t V = book.size(), n = points.size();
    double spread = 0.0;
    for (const auto& p : points)
      for (double v : p) spread += v * v;
    spread = std::sqrt(spread / static_cast<double>(n * R));
    const double jitter = 0.01 * (spread > 0.0 ? spread : 1.0);

    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t k = 0;
    if (state.pin_zero_codeword) {
      for (std::size_t r = 0; r < R; ++r) book.entries(0, r) = T{};
      for (std::size_t i = 0; i < n; ++i) d2[i] = sq(points[i], book.entries.data().data());
      k = 1;
    }
    for (; k < V; ++k) {
      std::size_t pick = 0;
      if (k == 0) {
        pick = rng.below(n);
      } else {
        double total = 0.0;
        for (double d : d2) total += d;
        if (!(total > 0.0)) break;  // every point is already a centre
        double u = rng.uniform() * total;
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
          u -= d2[i];
          if (u < 0.0) {
            pick = i;
            break;
          }
        }
      }
      for (std::size_t r = 0; r < R; ++r) book.entries(k, r) = static_cast<T>(points[pick][r]);
      const T* c = book.entries.data().data() + k * R;
      for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq(points[i], c));
    }
    for (; k < V; ++k) {
      const auto& p = points[rng.below(n)];
      for (std::size_t r = 0; r < R; ++r) book.entries(k, r) = static_cast<T>(p[r] + jitter * rng.normal());
    }
    std::fill(book.ema_cluster_size.begin(), book.ema_cluster_size.end(), 0.0);
    std::fill(book.ema_embed_sum.data().begin(), book.ema_embed_sum.data().end(), 0.0);
    std::fill(book.usage_counts.begin(), book.usage_counts.end(), 0);

    // Next stage is seeded from this stage's residuals.
    for (auto& p : points) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < V; ++j) {
        const double d = sq(p, book.entries.data().data() + j * R);
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      for (std::size_t r = 0; r < R; ++r) p[r] -= static_cast<double>(book.entries(best, r));
    }
  }
  state.steps_since_reseed = 0;
}

// Shannon entropy (nats) of codeword usage for one stage's codes.
inline double usage_entropy(std::span<const int> codes, std::size_t codebook_size) {
  if (codes.empty()) return 0.0;
  std::vector<double> counts(codebook_size, 0.0);
  for (int c : codes) counts.at(static_cast<std::size_t>(c)) += 1.0;
  double h = 0.0;
  for (double c : counts)
    if (c > 0.0) {
      const double p = c / static_cast<double>(codes.size());
      h -= p * std::log(p);
    }
  return h;
}

}  // namespace neurotok
