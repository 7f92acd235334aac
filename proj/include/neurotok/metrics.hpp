#pragma once

// Text generation metrics: BLEU-1, ROUGE-1, CER, WER, Self-BLEU.
//
// Word-level metrics lowercase ASCII, map ASCII punctuation to spaces and
// split on whitespace. CER compares raw Unicode code points, spaces
// included. Aggregation: BLEU-1 pools clipped counts over the corpus,
// ROUGE-1 averages per-pair scores, CER/WER pool edit counts and divide by
// the pooled reference length.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "neurotok/error.hpp"
#include "neurotok/rng.hpp"

namespace neurotok {

struct EvalPair {
  std::string prediction;
  std::vector<std::string> references;
};

struct MetricsSummary {
  double bleu1_pct = 0.0;
  double rouge1_recall_pct = 0.0;
  double rouge1_precision_pct = 0.0;
  double rouge1_f_pct = 0.0;
  double cer_pct = 0.0;
  double wer_pct = 0.0;
  double self_bleu_pct = 0.0;
};

inline nlohmann::json to_json(const MetricsSummary& m) {
  return {{"bleu1_pct", m.bleu1_pct},         {"rouge1_recall_pct", m.rouge1_recall_pct},
          {"rouge1_precision_pct", m.rouge1_precision_pct}, {"rouge1_f_pct", m.rouge1_f_pct},
          {"cer_pct", m.cer_pct},             {"wer_pct", m.wer_pct},
          {"self_bleu_pct", m.self_bleu_pct}};
}

inline std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char ch : text) {
    if (ch < 0x80 && (std::isspace(ch) || std::ispunct(ch))) {
      if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(ch < 0x80 ? static_cast<char>(std::tolower(ch)) : static_cast<char>(ch));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

// Invalid UTF-8 bytes are passed through as single units.
inline std::u32string code_points(std::string_view s) {
  std::u32string out;
  for (std::size_t i = 0; i < s.size();) {
    const auto b = static_cast<unsigned char>(s[i]);
    const int extra = b < 0x80 ? 0 : (b >> 5) == 0x6 ? 1 : (b >> 4) == 0xE ? 2 : (b >> 3) == 0x1E ? 3 : -1;
    if (extra <= 0 || i + static_cast<std::size_t>(extra) >= s.size()) {
      out.push_back(b);
      ++i;
      continue;
    }
    char32_t cp = b & (0x3F >> extra);
    bool ok = true;
    for (int k = 1; k <= extra; ++k) {
      const auto c = static_cast<unsigned char>(s[i + static_cast<std::size_t>(k)]);
      if ((c & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (c & 0x3F);
    }
    if (!ok) {
      out.push_back(b);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += static_cast<std::size_t>(extra) + 1;
  }
  return out;
}

// Unit-cost Levenshtein distance, two-row DP.
template <class Seq>
std::size_t edit_distance(const Seq& a, const Seq& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

namespace detail {

using Counts = std::map<std::string, std::size_t>;

inline Counts count_words(const std::vector<std::string>& ws) {
  Counts c;
  for (const auto& w : ws) ++c[w];
  return c;
}

inline void require_pairs(const std::vector<EvalPair>& pairs, const char* op) {
  if (pairs.empty()) throw ValidationError(std::string(op) + ": no prediction/reference pairs");
  for (const auto& p : pairs)
    if (p.references.empty()) throw ValidationError(std::string(op) + ": a pair has no references");
}

struct BleuCounts {
  double matches = 0, pred_len = 0, ref_len = 0;
};

// Clipped matches against the per-word maximum over references; effective
// reference length is the closest one (shorter wins ties).
inline BleuCounts bleu_counts(const EvalPair& p) {
  const auto pred = normalize_words(p.prediction);
  const auto pc = count_words(pred);
  Counts max_ref;
  std::size_t best_len = 0, best_gap = static_cast<std::size_t>(-1);
  for (const auto& r : p.references) {
    const auto rw = normalize_words(r);
    for (const auto& [w, n] : count_words(rw)) max_ref[w] = std::max(max_ref[w], n);
    const std::size_t gap = rw.size() > pred.size() ? rw.size() - pred.size() : pred.size() - rw.size();
    if (gap < best_gap || (gap == best_gap && rw.size() < best_len)) best_gap = gap, best_len = rw.size();
  }
  BleuCounts bc;
  for (const auto& [w, n] : pc) {
    auto it = max_ref.find(w);
    if (it != max_ref.end()) bc.matches += static_cast<double>(std::min(n, it->second));
  }
  bc.pred_len = static_cast<double>(pred.size());
  bc.ref_len = static_cast<double>(best_len);
  return bc;
}

inline double bleu_from(const BleuCounts& bc) {
  if (bc.pred_len == 0.0) return bc.ref_len == 0.0 ? 100.0 : 0.0;
  const double precision = bc.matches / bc.pred_len;
  const double bp = bc.pred_len < bc.ref_len ? std::exp(1.0 - bc.ref_len / bc.pred_len) : 1.0;
  return 100.0 * precision * bp;
}

}  // namespace detail

inline double bleu1(const std::vector<EvalPair>& pairs) {
  detail::require_pairs(pairs, "bleu1");
  detail::BleuCounts total;
  for (const auto& p : pairs) {
    const auto bc = detail::bleu_counts(p);
    total.matches += bc.matches;
    total.pred_len += bc.pred_len;
    total.ref_len += bc.ref_len;
  }
  return detail::bleu_from(total);
}

struct Rouge1 {
  double recall = 0.0, precision = 0.0, f = 0.0;  // percentages
};

inline Rouge1 rouge1_single(std::string_view prediction, std::string_view reference) {
  const auto pw = normalize_words(prediction), rw = normalize_words(reference);
  if (pw.empty() && rw.empty()) return {100.0, 100.0, 100.0};
  const auto pc = detail::count_words(pw), rc = detail::count_words(rw);
  double overlap = 0.0;
  for (const auto& [w, n] : pc) {
    auto it = rc.find(w);
    if (it != rc.end()) overlap += static_cast<double>(std::min(n, it->second));
  }
  Rouge1 r;
  r.recall = rw.empty() ? 0.0 : overlap / static_cast<double>(rw.size());
  r.precision = pw.empty() ? 0.0 : overlap / static_cast<double>(pw.size());
  r.f = r.recall + r.precision > 0.0 ? 2.0 * r.recall * r.precision / (r.recall + r.precision) : 0.0;
  r.recall *= 100.0, r.precision *= 100.0, r.f *= 100.0;
  return r;
}

// Best-F reference; ties keep the higher recall, then precision.
inline Rouge1 rouge1_pair(const EvalPair& p) {
  Rouge1 best{-1.0, -1.0, -1.0};
  for (const auto& ref : p.references) {
    const auto r = rouge1_single(p.prediction, ref);
    if (std::tie(r.f, r.recall, r.precision) > std::tie(best.f, best.recall, best.precision)) best = r;
  }
  return best;
}

inline Rouge1 rouge1(const std::vector<EvalPair>& pairs) {
  detail::require_pairs(pairs, "rouge1");
  Rouge1 acc;
  for (const auto& p : pairs) {
    const auto r = rouge1_pair(p);
    acc.recall += r.recall, acc.precision += r.precision, acc.f += r.f;
  }
  const auto n = static_cast<double>(pairs.size());
  return {acc.recall / n, acc.precision / n, acc.f / n};
}

struct EditCount {
  std::size_t edits = 0, ref_len = 0;
};

namespace detail {

// Closest reference: fewest edits, then the longer reference.
template <class Split>
EditCount best_edit(const EvalPair& p, Split split) {
  const auto pred = split(p.prediction);
  EditCount best{static_cast<std::size_t>(-1), 0};
  for (const auto& r : p.references) {
    const auto ref = split(r);
    const EditCount e{edit_distance(pred, ref), ref.size()};
    if (e.edits < best.edits || (e.edits == best.edits && e.ref_len > best.ref_len)) best = e;
  }
  return best;
}

template <class Split>
double pooled_rate(const std::vector<EvalPair>& pairs, Split split, const char* op) {
  require_pairs(pairs, op);
  double edits = 0.0, len = 0.0;
  for (const auto& p : pairs) {
    const auto e = best_edit(p, split);
    edits += static_cast<double>(e.edits);
    len += static_cast<double>(e.ref_len);
  }
  if (len == 0.0) throw ValidationError(std::string(op) + ": reference corpus is empty");
  return 100.0 * edits / len;
}

inline std::u32string split_chars(const std::string& s) { return code_points(s); }
inline std::vector<std::string> split_words(const std::string& s) { return normalize_words(s); }

}  // namespace detail

inline EditCount cer_counts(const EvalPair& p) { return detail::best_edit(p, detail::split_chars); }
inline EditCount wer_counts(const EvalPair& p) { return detail::best_edit(p, detail::split_words); }

inline double cer(const std::vector<EvalPair>& pairs) { return detail::pooled_rate(pairs, detail::split_chars, "cer"); }
inline double wer(const std::vector<EvalPair>& pairs) { return detail::pooled_rate(pairs, detail::split_words, "wer"); }

inline double self_bleu(const std::vector<std::string>& corpus) {
  if (corpus.size() < 2) throw ValidationError("self_bleu: needs at least two sentences");
  double acc = 0.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EvalPair p{corpus[i], {}};
    for (std::size_t j = 0; j < corpus.size(); ++j)
      if (j != i) p.references.push_back(corpus[j]);
    acc += bleu1({p});
  }
  return acc / static_cast<double>(corpus.size());
}

struct PairScores {
  double bleu1 = 0.0;
  Rouge1 rouge;
  double cer = 0.0;  // per-pair rates, percent
  double wer = 0.0;
};

inline std::vector<PairScores> score_pairs(const std::vector<EvalPair>& pairs) {
  detail::require_pairs(pairs, "score_pairs");
  std::vector<PairScores> out;
  out.reserve(pairs.size());
  auto rate = [](EditCount e) {
    return e.ref_len ? 100.0 * static_cast<double>(e.edits) / static_cast<double>(e.ref_len)
                     : (e.edits ? 100.0 : 0.0);
  };
  for (const auto& p : pairs)
    out.push_back({bleu1({p}), rouge1_pair(p), rate(cer_counts(p)), rate(wer_counts(p))});
  return out;
}

// Full battery; Self-BLEU is over the predictions (0 for a single pair).
inline MetricsSummary evaluate_pairs(const std::vector<EvalPair>& pairs) {
  MetricsSummary m;
  m.bleu1_pct = bleu1(pairs);
  const auto r = rouge1(pairs);
  m.rouge1_recall_pct = r.recall;
  m.rouge1_precision_pct = r.precision;
  m.rouge1_f_pct = r.f;
  m.cer_pct = cer(pairs);
  m.wer_pct = wer(pairs);
  if (pairs.size() >= 2) {
    std::vector<std::string> preds;
    for (const auto& p : pairs) preds.push_back(p.prediction);
    m.self_bleu_pct = self_bleu(preds);
  }
  return m;
}

// Each reference is "predicted" by a different, uniformly drawn test item.
inline MetricsSummary random_selecting_baseline(const std::vector<std::string>& references, std::uint64_t seed) {
  if (references.size() < 2) throw ValidationError("random baseline: pool needs at least two references");
  SplitMix64 rng(seed);
  std::vector<EvalPair> pairs;
  pairs.reserve(references.size());
  for (std::size_t i = 0; i < references.size(); ++i) {
    std::size_t j = rng.below(references.size() - 1);
    if (j >= i) ++j;
    pairs.push_back({references[j], {references[i]}});
  }
  return evaluate_pairs(pairs);
}

}  // namespace neurotok
