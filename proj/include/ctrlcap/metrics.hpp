#pragma once

// Caption-level evaluation and reward primitives.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "ctrlcap/error.hpp"
#include "ctrlcap/lexicon.hpp"

namespace ctrlcap {

using TokenSeq = std::vector<int>;

/// Noun tokens of a caption in order, stopping at <eos>.
inline std::vector<int> extract_nouns(const TokenSeq& tokens, const Lexicon& lex) {
  std::vector<int> out;
  for (int t : tokens) {
    if (t == Lexicon::kEos) break;
    if (lex.is_noun(t)) out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Needleman-Wunsch alignment over noun sequences

struct Alignment {
  // (index in a, index in b); -1 marks a gap on that side.
  std::vector<std::pair<int, int>> pairs;
  double score = 0.0;
};

inline constexpr double kGapReward = -1.0;

/// Global alignment, match reward = cosine similarity, gap reward = -1.
/// Backtrace prefers match, then gap in a, then gap in b.
inline Alignment nw_align(const std::vector<int>& a, const std::vector<int>& b, const NounEmbeddingTable& table) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::vector<double>> sim(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) sim[i][j] = table.cosine(a[i], b[j]);
  // Touch every noun so a missing embedding is reported even with one side empty.
  for (int w : a) (void)table.at(w);
  for (int w : b) (void)table.at(w);

  std::vector<std::vector<double>> F(n + 1, std::vector<double>(m + 1, 0.0));
  for (std::size_t i = 1; i <= n; ++i) F[i][0] = F[i - 1][0] + kGapReward;
  for (std::size_t j = 1; j <= m; ++j) F[0][j] = F[0][j - 1] + kGapReward;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      F[i][j] = std::max({F[i - 1][j - 1] + sim[i - 1][j - 1], F[i - 1][j] + kGapReward, F[i][j - 1] + kGapReward});

  Alignment al;
  al.score = F[n][m];
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && F[i][j] == F[i - 1][j - 1] + sim[i - 1][j - 1]) {
      al.pairs.emplace_back(static_cast<int>(i - 1), static_cast<int>(j - 1));
      --i;
      --j;
    } else if (i > 0 && F[i][j] == F[i - 1][j] + kGapReward) {
      // a[i-1] aligned against a gap in b
      al.pairs.emplace_back(static_cast<int>(i - 1), -1);
      --i;
    } else {
      al.pairs.emplace_back(-1, static_cast<int>(j - 1));
      --j;
    }
  }
  std::reverse(al.pairs.begin(), al.pairs.end());
  return al;
}

/// Alignment score normalized by the longer noun list; in [-1, 1].
/// Two empty lists score 1.
inline double nw_score_nouns(const std::vector<int>& a, const std::vector<int>& b, const NounEmbeddingTable& table) {
  if (a.empty() && b.empty()) return 1.0;
  const double al = nw_align(a, b, table).score;
  return al / static_cast<double>(std::max(a.size(), b.size()));
}

inline double nw_score(const TokenSeq& cand, const TokenSeq& ref, const Lexicon& lex) {
  return nw_score_nouns(extract_nouns(cand, lex), extract_nouns(ref, lex), lex.nouns);
}

// ---------------------------------------------------------------------------
// Assignment

namespace detail {

// Shortest augmenting path with potentials on a square matrix. Returns the
// row -> column assignment.
inline std::vector<std::size_t> solve_assignment(const std::vector<std::vector<double>>& a) {
  const std::size_t n = a.size();
  const double inf = std::numeric_limits<double>::infinity();
  // 1-indexed; column 0 is the virtual root.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline double optimal_cost(const std::vector<std::vector<double>>& a) {
  if (a.empty()) return 0.0;
  const auto assign = solve_assignment(a);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i][assign[i]];
  return s;
}

}  // namespace detail

/// Row -> column assignment minimizing total cost. Rectangular inputs are
/// padded with zero-cost dummy rows/columns; rows matched to a dummy column
/// get -1. Among equal-cost optima, rows are fixed in increasing order, each
/// to the lowest column that still admits an optimal completion.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t rows = cost.size();
  if (rows == 0) return {};
  const std::size_t cols = cost[0].size();
  for (const auto& r : cost) {
    if (r.size() != cols) throw DimensionError("hungarian: ragged cost matrix");
    for (double v : r)
      if (!std::isfinite(v)) throw NumericError("hungarian: non-finite cost");
  }
  const std::size_t n = std::max(rows, cols);
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) a[i][j] = cost[i][j];

  const double best = detail::optimal_cost(a);
  double scale = 0.0;
  for (const auto& r : a)
    for (double v : r) scale = std::max(scale, std::abs(v));
  const double tol = 1e-9 * (1.0 + scale * static_cast<double>(n));

  std::vector<bool> col_taken(n, false);
  std::vector<std::size_t> fixed(n, 0);
  double fixed_cost = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    bool found = false;
    for (std::size_t j = 0; j < n && !found; ++j) {
      if (col_taken[j]) continue;
      std::vector<std::size_t> rest_cols;
      for (std::size_t c = 0; c < n; ++c)
        if (!col_taken[c] && c != j) rest_cols.push_back(c);
      std::vector<std::vector<double>> rest(n - i - 1, std::vector<double>(rest_cols.size()));
      for (std::size_t r = i + 1; r < n; ++r)
        for (std::size_t c = 0; c < rest_cols.size(); ++c) rest[r - i - 1][c] = a[r][rest_cols[c]];
      if (fixed_cost + a[i][j] + detail::optimal_cost(rest) <= best + tol) {
        fixed[i] = j;
        col_taken[j] = true;
        fixed_cost += a[i][j];
        found = true;
      }
    }
    if (!found) {
      fixed = detail::solve_assignment(a);
      break;
    }
  }

  std::vector<int> out(rows, -1);
  for (std::size_t i = 0; i < rows; ++i) out[i] = fixed[i] < cols ? static_cast<int>(fixed[i]) : -1;
  return out;
}

/// Assignment maximizing total profit.
inline std::vector<int> hungarian_max(const std::vector<std::vector<double>>& profit) {
  auto cost = profit;
  for (auto& r : cost)
    for (auto& v : r) v = -v;
  return hungarian(cost);
}

inline double assignment_cost(const std::vector<std::vector<double>>& cost, const std::vector<int>& assign) {
  double s = 0.0;
  for (std::size_t i = 0; i < assign.size(); ++i)
    if (assign[i] >= 0) s += cost[i][static_cast<std::size_t>(assign[i])];
  return s;
}

// ---------------------------------------------------------------------------
// Soft intersection-over-union between noun sets

/// Intersection = max-profit one-to-one matching with profit = cosine clamped
/// to [0, 1]; IoU = I / (#a + #b - I). Two empty sets score 1.
inline double soft_iou_nouns(const std::vector<int>& a, const std::vector<int>& b, const NounEmbeddingTable& table) {
  for (int w : a) (void)table.at(w);
  for (int w : b) (void)table.at(w);
  if (a.empty() && b.empty()) return 1.0;
  double inter = 0.0;
  if (!a.empty() && !b.empty()) {
    std::vector<std::vector<double>> profit(a.size(), std::vector<double>(b.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < b.size(); ++j) profit[i][j] = std::clamp(table.cosine(a[i], b[j]), 0.0, 1.0);
    const auto assign = hungarian_max(profit);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (assign[i] >= 0) inter += profit[i][static_cast<std::size_t>(assign[i])];
  }
  const double denom = static_cast<double>(a.size() + b.size()) - inter;
  return denom > 0 ? inter / denom : 1.0;
}

inline double soft_iou(const TokenSeq& cand, const TokenSeq& ref, const Lexicon& lex) {
  return soft_iou_nouns(extract_nouns(cand, lex), extract_nouns(ref, lex), lex.nouns);
}

// ---------------------------------------------------------------------------
// CIDEr-D

using NGram = std::vector<int>;

namespace detail {

inline std::map<NGram, double> ngram_counts(const TokenSeq& tokens, int max_n) {
  std::vector<int> words;
  for (int t : tokens) {
    if (t == Lexicon::kEos) break;
    words.push_back(t);
  }
  std::map<NGram, double> counts;
  for (int n = 1; n <= max_n; ++n)
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i)
      counts[NGram(words.begin() + static_cast<std::ptrdiff_t>(i), words.begin() + static_cast<std::ptrdiff_t>(i) + n)] += 1.0;
  return counts;
}

}  // namespace detail

/// Document frequencies over reference groups; one group is the set of
/// references for one evaluation item.
class CiderStats {
 public:
  static constexpr int kMaxN = 4;

  CiderStats() = default;
  explicit CiderStats(const std::vector<std::vector<TokenSeq>>& ref_groups) {
    for (const auto& group : ref_groups) {
      std::set<NGram> present;
      for (const auto& ref : group)
        for (const auto& [g, _] : detail::ngram_counts(ref, kMaxN)) present.insert(g);
      for (const auto& g : present) df_[g] += 1.0;
    }
    log_num_docs_ = std::log(static_cast<double>(std::max<std::size_t>(ref_groups.size(), 1)));
  }

  double df(const NGram& g) const {
    auto it = df_.find(g);
    return it == df_.end() ? 0.0 : it->second;
  }
  double log_num_docs() const { return log_num_docs_; }

 private:
  std::map<NGram, double> df_;
  double log_num_docs_ = 0.0;
};

namespace detail {

struct CiderVec {
  std::map<NGram, double> vec[CiderStats::kMaxN];
  double norm[CiderStats::kMaxN] = {0, 0, 0, 0};
  double length = 0.0;
};

inline CiderVec cider_vec(const TokenSeq& tokens, const CiderStats& stats) {
  CiderVec out;
  for (const auto& [g, tf] : ngram_counts(tokens, CiderStats::kMaxN)) {
    const double df = std::log(std::max(1.0, stats.df(g)));
    const std::size_t n = g.size() - 1;
    const double w = tf * (stats.log_num_docs() - df);
    out.vec[n][g] = w;
    out.norm[n] += w * w;
    // Length is the bigram count, as in the reference CIDEr-D implementation.
    if (n == 1) out.length += tf;
  }
  for (auto& x : out.norm) x = std::sqrt(x);
  return out;
}

}  // namespace detail

/// CIDEr-D in [0, 10]: clipped TF-IDF cosine per n = 1..4 with a Gaussian
/// length penalty (sigma 6), averaged over n and references, times 10.
inline double cider_d(const TokenSeq& cand, const std::vector<TokenSeq>& refs, const CiderStats& stats,
                      double sigma = 6.0) {
  if (refs.empty()) throw UsageError("cider_d: no references");
  if (cand.empty() || cand.front() == Lexicon::kEos) return 0.0;
  const auto hv = detail::cider_vec(cand, stats);
  double total = 0.0;
  for (const auto& ref : refs) {
    const auto rv = detail::cider_vec(ref, stats);
    const double delta = hv.length - rv.length;
    for (int n = 0; n < CiderStats::kMaxN; ++n) {
      double val = 0.0;
      for (const auto& [g, w] : hv.vec[n]) {
        auto it = rv.vec[n].find(g);
        if (it == rv.vec[n].end()) continue;
        val += std::min(w, it->second) * it->second;
      }
      if (hv.norm[n] != 0.0 && rv.norm[n] != 0.0) val /= hv.norm[n] * rv.norm[n];
      val *= std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      total += val;
    }
  }
  return total / CiderStats::kMaxN / static_cast<double>(refs.size()) * 10.0;
}

// ---------------------------------------------------------------------------
// Rankings

/// Kendall's tau-a between two orderings of the same items (each a sequence
/// of item ids). Length-1 orderings score 1.
inline double kendall_tau(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size())
    throw UsageError("kendall_tau: length mismatch " + std::to_string(pred.size()) + " vs " +
                     std::to_string(truth.size()));
  const std::size_t n = pred.size();
  if (n < 2) return 1.0;
  std::map<int, std::size_t> pos_pred, pos_true;
  for (std::size_t i = 0; i < n; ++i) {
    pos_pred[pred[i]] = i;
    pos_true[truth[i]] = i;
  }
  if (pos_pred.size() != n || pos_true.size() != n) throw UsageError("kendall_tau: orderings contain duplicates");
  long conc = 0, disc = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const int a = truth[i], b = truth[j];
      auto pa = pos_pred.find(a), pb = pos_pred.find(b);
      if (pa == pos_pred.end() || pb == pos_pred.end()) throw UsageError("kendall_tau: orderings differ in items");
      (pa->second < pb->second ? conc : disc)++;
    }
  return static_cast<double>(conc - disc) / (0.5 * static_cast<double>(n * (n - 1)));
}

/// Fraction of exactly recovered orderings.
inline double ranking_accuracy(const std::vector<std::pair<std::vector<int>, std::vector<int>>>& batch) {
  if (batch.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& [pred, truth] : batch) {
    if (pred.size() != truth.size()) throw UsageError("ranking_accuracy: length mismatch");
    ok += pred == truth;
  }
  return static_cast<double>(ok) / static_cast<double>(batch.size());
}

}  // namespace ctrlcap
