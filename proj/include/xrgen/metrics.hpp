#pragma once

// Sentence-level BLEU-1..4 and exact-match METEOR over token sequences.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xrgen/error.hpp"

namespace xrgen {

using Tokens = std::vector<std::string>;

struct NgramMatch {
  std::size_t clipped = 0;
  std::size_t total = 0;
};

/// Candidate n-gram counts clipped by reference counts.
inline NgramMatch modified_ngram_precision(const Tokens& cand, const Tokens& ref, std::size_t n) {
  if (n == 0) throw UsageError("modified_ngram_precision: n must be >= 1");
  NgramMatch r;
  if (cand.size() < n) return r;
  auto counts = [n](const Tokens& t) {
    std::map<Tokens, std::size_t> c;
    for (std::size_t i = 0; i + n <= t.size(); ++i) ++c[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n))];
    return c;
  };
  const auto cc = counts(cand);
  const auto rc = counts(ref);
  for (const auto& [g, k] : cc) {
    auto it = rc.find(g);
    if (it != rc.end()) r.clipped += std::min(k, it->second);
  }
  r.total = cand.size() - n + 1;
  return r;
}

struct BleuOptions {
  bool brevity_penalty = true;
};

inline double brevity_penalty(std::size_t cand_len, std::size_t ref_len) {
  if (cand_len == 0) return 0.0;
  return std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len)));
}

/// Geometric mean of modified precisions 1..n times the brevity penalty.
/// Unsmoothed: any zero (or undefined) precision gives 0.
inline double bleu_n(const Tokens& cand, const Tokens& ref, std::size_t n, const BleuOptions& opt = {}) {
  if (n < 1 || n > 4) throw UsageError("bleu_n: n must be in [1,4]");
  if (cand.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const auto m = modified_ngram_precision(cand, ref, k);
    if (m.clipped == 0 || m.total == 0) return 0.0;
    log_sum += std::log(static_cast<double>(m.clipped) / static_cast<double>(m.total));
  }
  const double bp = opt.brevity_penalty ? brevity_penalty(cand.size(), ref.size()) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// METEOR (exact unigram matches only)
// ---------------------------------------------------------------------------

struct MeteorParams {
  double alpha = 0.9;
  double beta = 3.0;
  double gamma = 0.5;
};

/// Candidate-to-reference links sorted by candidate position.
using Alignment = std::vector<std::pair<std::size_t, std::size_t>>;

inline std::size_t count_chunks(const Alignment& a) {
  if (a.empty()) return 0;
  std::size_t chunks = 1;
  for (std::size_t k = 1; k < a.size(); ++k) {
    if (a[k].first != a[k - 1].first + 1 || a[k].second != a[k - 1].second + 1) ++chunks;
  }
  return chunks;
}

namespace detail {

/// Depth-first search over maximum-cardinality exact-match alignments for
/// the one with fewest chunks. Seeded with a greedy longest-run tiling and
/// pruned on the chunk count; `budget` caps visited nodes, after which the
/// best alignment found so far is kept.
class MinChunkAligner {
 public:
  MinChunkAligner(const Tokens& cand, const Tokens& ref, std::size_t budget) : cand_(cand), ref_(ref), budget_(budget) {
    std::map<std::string, std::size_t> cc, rc;
    for (const auto& t : cand) ++cc[t];
    for (const auto& t : ref) ++rc[t];
    for (const auto& [t, k] : cc) {
      auto it = rc.find(t);
      if (it != rc.end()) {
        const std::size_t m = std::min(k, it->second);
        quota_[t] = m;
        target_ += m;
        // candidate occurrences that may stay unmatched
        skips_[t] = k - m;
      } else {
        skips_[t] = k;
      }
    }
  }

  Alignment run() {
    best_ = greedy();
    best_chunks_ = count_chunks(best_);
    if (target_ == 0) return {};
    used_.assign(ref_.size(), false);
    cur_.clear();
    search(0, 0);
    return best_;
  }

  std::size_t matches() const { return target_; }

 private:
  Alignment greedy() const {
    std::vector<bool> cu(cand_.size(), false), ru(ref_.size(), false);
    std::map<std::string, std::size_t> left = quota_;
    Alignment a;
    for (;;) {
      std::size_t best_len = 0, bi = 0, bj = 0;
      for (std::size_t i = 0; i < cand_.size(); ++i) {
        for (std::size_t j = 0; j < ref_.size(); ++j) {
          std::size_t len = 0;
          std::map<std::string, std::size_t> need;
          while (i + len < cand_.size() && j + len < ref_.size() && !cu[i + len] && !ru[j + len] &&
                 cand_[i + len] == ref_[j + len] && ++need[cand_[i + len]] <= left[cand_[i + len]]) {
            ++len;
          }
          if (len > best_len) {
            best_len = len;
            bi = i;
            bj = j;
          }
        }
      }
      if (best_len == 0) break;
      for (std::size_t k = 0; k < best_len; ++k) {
        cu[bi + k] = ru[bj + k] = true;
        --left[cand_[bi + k]];
        a.emplace_back(bi + k, bj + k);
      }
    }
    std::sort(a.begin(), a.end());
    return a;
  }

  void search(std::size_t i, std::size_t chunks) {
    if (visited_++ > budget_) return;
    if (chunks >= best_chunks_) return;
    if (i == cand_.size()) {
      if (cur_.size() == target_) {
        best_ = cur_;
        best_chunks_ = chunks;
      }
      return;
    }
    const std::string& t = cand_[i];
    auto q = quota_.find(t);
    const bool can_match = q != quota_.end() && q->second > 0;
    if (can_match) {
      // try the continuation of the current chunk first
      std::vector<std::size_t> js;
      if (!cur_.empty() && cur_.back().first + 1 == i) {
        const std::size_t j = cur_.back().second + 1;
        if (j < ref_.size() && !used_[j] && ref_[j] == t) js.push_back(j);
      }
      for (std::size_t j = 0; j < ref_.size(); ++j) {
        if (!used_[j] && ref_[j] == t && (js.empty() || js.front() != j)) js.push_back(j);
      }
      for (std::size_t j : js) {
        const bool extends = !cur_.empty() && cur_.back().first + 1 == i && cur_.back().second + 1 == j;
        used_[j] = true;
        --q->second;
        cur_.emplace_back(i, j);
        search(i + 1, chunks + (extends ? 0 : 1));
        cur_.pop_back();
        ++q->second;
        used_[j] = false;
      }
    }
    auto s = skips_.find(t);
    if (s != skips_.end() && s->second > 0) {
      --s->second;
      search(i + 1, chunks);
      ++s->second;
    }
  }

  const Tokens& cand_;
  const Tokens& ref_;
  std::size_t budget_;
  std::size_t visited_ = 0;
  std::map<std::string, std::size_t> quota_;
  std::map<std::string, std::size_t> skips_;
  std::size_t target_ = 0;
  std::vector<bool> used_;
  Alignment cur_;
  Alignment best_;
  std::size_t best_chunks_ = 0;
};

}  // namespace detail

struct MeteorResult {
  double score = 0.0;
  double fmean = 0.0;
  double penalty = 0.0;
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

/// Maximum-match alignment with the fewest chunks.
inline Alignment meteor_align(const Tokens& cand, const Tokens& ref, std::size_t budget = 200000) {
  return detail::MinChunkAligner(cand, ref, budget).run();
}

inline MeteorResult meteor_lite_detail(const Tokens& cand, const Tokens& ref, const MeteorParams& prm = {}) {
  MeteorResult r;
  const Alignment a = meteor_align(cand, ref);
  r.matches = a.size();
  if (r.matches == 0) return r;
  r.chunks = count_chunks(a);
  const double m = static_cast<double>(r.matches);
  const double P = m / static_cast<double>(cand.size());
  const double R = m / static_cast<double>(ref.size());
  r.fmean = P * R / (prm.alpha * P + (1.0 - prm.alpha) * R);
  r.penalty = prm.gamma * std::pow(static_cast<double>(r.chunks) / m, prm.beta);
  r.score = r.fmean * (1.0 - r.penalty);
  return r;
}

inline double meteor_lite(const Tokens& cand, const Tokens& ref, const MeteorParams& prm = {}) {
  return meteor_lite_detail(cand, ref, prm).score;
}

// ---------------------------------------------------------------------------
// Corpus scoring
// ---------------------------------------------------------------------------

struct ExamScores {
  std::string id;
  double bleu[4] = {0, 0, 0, 0};
  double meteor = 0.0;
};

struct ScoreReport {
  std::vector<ExamScores> per_exam;
  double mean_bleu[4] = {0, 0, 0, 0};
  double mean_meteor = 0.0;
  std::size_t count = 0;
  std::size_t empty_candidates = 0;
  /// BLEU with clipped counts and lengths pooled over the corpus.
  double pooled_bleu[4] = {0, 0, 0, 0};
};

struct ScoredPair {
  std::string id;
  Tokens generated;
  Tokens reference;
};

inline ScoreReport score_corpus(const std::vector<ScoredPair>& pairs) {
  if (pairs.empty()) throw UsageError("score_corpus: no pairs to score");
  ScoreReport rep;
  std::size_t clipped[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0}, cand_len = 0, ref_len = 0;
  for (const auto& p : pairs) {
    ExamScores s;
    s.id = p.id;
    if (p.generated.empty()) ++rep.empty_candidates;
    for (std::size_t n = 1; n <= 4; ++n) {
      s.bleu[n - 1] = bleu_n(p.generated, p.reference, n);
      const auto m = modified_ngram_precision(p.generated, p.reference, n);
      clipped[n - 1] += m.clipped;
      total[n - 1] += m.total;
    }
    cand_len += p.generated.size();
    ref_len += p.reference.size();
    s.meteor = meteor_lite(p.generated, p.reference);
    rep.per_exam.push_back(std::move(s));
  }
  rep.count = pairs.size();
  for (const auto& s : rep.per_exam) {
    for (std::size_t k = 0; k < 4; ++k) rep.mean_bleu[k] += s.bleu[k];
    rep.mean_meteor += s.meteor;
  }
  const double inv = 1.0 / static_cast<double>(rep.count);
  for (double& b : rep.mean_bleu) b *= inv;
  rep.mean_meteor *= inv;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (clipped[n] == 0 || total[n] == 0) {
      for (std::size_t k = n; k < 4; ++k) rep.pooled_bleu[k] = 0.0;
      break;
    }
    log_sum += std::log(static_cast<double>(clipped[n]) / static_cast<double>(total[n]));
    rep.pooled_bleu[n] = brevity_penalty(cand_len, ref_len) * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return rep;
}

inline std::string format_fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// `exam_id<TAB>bleu1..4<TAB>meteor` rows (x100) plus a final MEAN row.
inline std::string format_score_table(const ScoreReport& rep) {
  std::string s = "exam_id\tbleu1\tbleu2\tbleu3\tbleu4\tmeteor_lite\n";
  auto row = [&](const std::string& id, const double* b, double m) {
    s += id;
    for (std::size_t k = 0; k < 4; ++k) s += '\t' + format_fixed(100.0 * b[k]);
    s += '\t' + format_fixed(100.0 * m) + '\n';
  };
  for (const auto& e : rep.per_exam) row(e.id, e.bleu, e.meteor);
  row("MEAN", rep.mean_bleu, rep.mean_meteor);
  return s;
}

}  // namespace xrgen
