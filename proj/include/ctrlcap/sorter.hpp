#pragma once

// Orders an unordered collection of region sets. Each region goes through a
// visual branch (two layers), a textual branch on its class embedding, a
// merge layer that also sees the box geometry, and a tanh head with one unit
// per output position. Region descriptors are mean-pooled per set; the
// stacked set descriptors give a score matrix X (item x position) that a
// Sinkhorn relaxation turns into a soft permutation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <vector>

#include "json.hpp"

#include "ctrlcap/data.hpp"
#include "ctrlcap/error.hpp"
#include "ctrlcap/metrics.hpp"
#include "ctrlcap/optim.hpp"
#include "ctrlcap/rng.hpp"
#include "ctrlcap/tensor.hpp"

namespace ctrlcap {

struct SortNetConfig {
  std::size_t feat_dim = 64;
  std::size_t emb_dim = 16;
  std::size_t visual1 = 32;
  std::size_t visual2 = 16;
  std::size_t textual = 16;
  std::size_t merge = 32;
  std::size_t n_max = kMaxControlLength;
  std::size_t sinkhorn_iters = 20;
  double temperature = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (feat_dim == 0 || emb_dim == 0 || visual1 == 0 || visual2 == 0 || textual == 0 || merge == 0)
      throw ConfigError("sorter widths must be positive");
    if (n_max < 1 || n_max > kMaxControlLength) throw ConfigError("sorter n_max must be in [1,10]");
    if (sinkhorn_iters < 1) throw ConfigError("sinkhorn_iters must be at least 1");
    if (!(temperature > 0)) throw ConfigError("sorter temperature must be positive");
  }
};

struct SortNetParams {
  SortNetConfig config;
  Tensor v1_w, v1_b, v2_w, v2_b;  // visual branch
  Tensor t_w, t_b;                // textual branch
  Tensor m_w, m_b;                // merge over [visual; textual; geom]
  Tensor head_w, head_b;          // n_max outputs, tanh

  /// Xavier-uniform weights, zero biases.
  static SortNetParams init(const SortNetConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const auto xavier = [&](std::size_t out, std::size_t in) {
      const double lim = std::sqrt(6.0 / static_cast<double>(in + out));
      std::vector<double> v(out * in);
      for (auto& x : v) x = rng.uniform(-lim, lim);
      return Tensor::from({out, in}, std::move(v), true);
    };
    const auto zero = [](std::size_t n) { return Tensor::zeros({n}, true); };
    SortNetParams p;
    p.config = cfg;
    p.v1_w = xavier(cfg.visual1, cfg.feat_dim);
    p.v1_b = zero(cfg.visual1);
    p.v2_w = xavier(cfg.visual2, cfg.visual1);
    p.v2_b = zero(cfg.visual2);
    p.t_w = xavier(cfg.textual, cfg.emb_dim);
    p.t_b = zero(cfg.textual);
    p.m_w = xavier(cfg.merge, cfg.visual2 + cfg.textual + 4);
    p.m_b = zero(cfg.merge);
    p.head_w = xavier(cfg.n_max, cfg.merge);
    p.head_b = zero(cfg.n_max);
    return p;
  }

  NamedParams named() const {
    return {{"v1_w", v1_w}, {"v1_b", v1_b}, {"v2_w", v2_w}, {"v2_b", v2_b},     {"t_w", t_w},
            {"t_b", t_b},   {"m_w", m_w},   {"m_b", m_b},   {"head_w", head_w}, {"head_b", head_b}};
  }

  std::vector<Tensor*> named_mut() { return {&v1_w, &v1_b, &v2_w, &v2_b, &t_w, &t_b, &m_w, &m_b, &head_w, &head_b}; }

  SortNetParams clone() const {
    SortNetParams p = *this;
    auto src = named();
    auto dst = p.named_mut();
    for (std::size_t i = 0; i < src.size(); ++i)
      *dst[i] = Tensor::from(src[i].second.shape(), src[i].second.to_vector(), true);
    return p;
  }
};

/// Sinkhorn operator: exp(X - max X), then L rounds of row normalization
/// followed by column normalization.
inline Tensor sinkhorn(const Tensor& x, std::size_t iters) {
  if (x.rank() != 2 || x.dim(0) != x.dim(1)) throw DimensionError("sinkhorn: expected a square matrix, got " + shape_str(x.shape()));
  x.check_finite("sinkhorn input");
  const auto d = x.data();
  const double mx = *std::max_element(d.begin(), d.end());
  Tensor s = exp(add_scalar(x, -mx));
  for (std::size_t l = 0; l < iters; ++l) s = normalize_cols(normalize_rows(s));
  return s;
}

namespace detail {

inline Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) { return add_rowwise(matmul(x, transpose(w)), b); }

}  // namespace detail

/// Per-region head outputs (n x n_max).
inline Tensor encode_regions(const SortNetParams& p, const RegionSet& set) {
  if (set.regions.empty()) throw UsageError("encode_set: empty region set");
  const auto& cfg = p.config;
  const std::size_t n = set.size();
  std::vector<double> f, e, g;
  for (const auto& r : set.regions) {
    if (r.feat.size() != cfg.feat_dim || r.class_emb.size() != cfg.emb_dim)
      throw DimensionError("region does not match sorter input dimensions");
    f.insert(f.end(), r.feat.begin(), r.feat.end());
    e.insert(e.end(), r.class_emb.begin(), r.class_emb.end());
    g.insert(g.end(), r.geom.begin(), r.geom.end());
  }
  const Tensor F = Tensor::from({n, cfg.feat_dim}, std::move(f));
  const Tensor E = Tensor::from({n, cfg.emb_dim}, std::move(e));
  const Tensor G = Tensor::from({n, 4}, std::move(g));
  const Tensor vis = relu(detail::dense(relu(detail::dense(F, p.v1_w, p.v1_b)), p.v2_w, p.v2_b));
  const Tensor txt = relu(detail::dense(E, p.t_w, p.t_b));
  const Tensor merged = relu(detail::dense(concat_cols({vis, txt, G}), p.m_w, p.m_b));
  return tanh(detail::dense(merged, p.head_w, p.head_b));
}

/// Mean-pooled set descriptor (n_max).
inline Tensor encode_set(const SortNetParams& p, const RegionSet& set) { return mean_rows(encode_regions(p, set)); }

/// Score matrix X (N x N): row i holds the first N head outputs of set i,
/// divided by the temperature.
inline Tensor score_matrix(const SortNetParams& p, const std::vector<RegionSet>& sets) {
  const std::size_t N = sets.size();
  if (N == 0) throw UsageError("sort: empty collection of region sets");
  if (N > p.config.n_max)
    throw UsageError("sort: " + std::to_string(N) + " sets exceed n_max " + std::to_string(p.config.n_max));
  std::vector<Tensor> rows;
  for (const auto& s : sets) rows.push_back(encode_set(p, s));
  // Masking to the first N positions as a constant selection matrix.
  std::vector<double> sel(p.config.n_max * N, 0.0);
  for (std::size_t k = 0; k < N; ++k) sel[k * N + k] = 1.0;
  const Tensor x = matmul(stack(rows), Tensor::from({p.config.n_max, N}, std::move(sel)));
  return scale(x, 1.0 / p.config.temperature);
}

inline Tensor soft_permutation(const SortNetParams& p, const std::vector<RegionSet>& sets) {
  return sinkhorn(score_matrix(p, sets), p.config.sinkhorn_iters);
}

/// Hard decode of a soft permutation: position_of[item].
inline std::vector<int> decode_permutation(const Tensor& soft) {
  const std::size_t N = soft.dim(0);
  std::vector<std::vector<double>> profit(N, std::vector<double>(N));
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < N; ++k) profit[i][k] = soft.at(i * N + k);
  return hungarian_max(profit);
}

struct SortResult {
  std::vector<std::size_t> order;  // order[k] = input index placed at position k
  ControlSignal control;
};

inline SortResult sort_control(const SortNetParams& p, const std::vector<RegionSet>& scrambled) {
  if (scrambled.empty()) throw UsageError("sort_control: empty input");
  NoGradGuard no_grad;
  const auto position = decode_permutation(soft_permutation(p, scrambled));
  SortResult r;
  r.order.assign(scrambled.size(), 0);
  for (std::size_t i = 0; i < position.size(); ++i) r.order[static_cast<std::size_t>(position[i])] = i;
  for (std::size_t k : r.order) r.control.sets.push_back(scrambled[k]);
  return r;
}

/// feat-mean ⊕ class-embedding-mean ⊕ geometry-mean of one set.
inline std::vector<double> set_descriptor(const RegionSet& set) {
  if (set.regions.empty()) throw UsageError("set_descriptor: empty region set");
  const auto& r0 = set.regions[0];
  std::vector<double> d(r0.feat.size() + r0.class_emb.size() + 4, 0.0);
  for (const auto& r : set.regions) {
    std::size_t o = 0;
    for (double v : r.feat) d[o++] += v;
    for (double v : r.class_emb) d[o++] += v;
    for (double v : r.geom) d[o++] += v;
  }
  for (auto& v : d) v /= static_cast<double>(set.size());
  return d;
}

inline Tensor descriptor_matrix(const std::vector<RegionSet>& sets) {
  std::vector<double> v;
  std::size_t D = 0;
  for (const auto& s : sets) {
    auto d = set_descriptor(s);
    D = d.size();
    v.insert(v.end(), d.begin(), d.end());
  }
  return Tensor::from({sets.size(), D}, std::move(v));
}

/// MSE between the scrambled descriptors and P applied to the sorted ones.
/// P has rows indexed by scrambled item and columns by position, so P * R*
/// places position k's descriptor on the item assigned to k.
inline Tensor sorter_loss(const SortNetParams& p, const std::vector<RegionSet>& scrambled,
                          const std::vector<RegionSet>& sorted) {
  if (scrambled.size() != sorted.size()) throw UsageError("sorter_loss: set counts differ");
  const Tensor P = soft_permutation(p, scrambled);
  return mse(descriptor_matrix(scrambled), matmul(P, descriptor_matrix(sorted)));
}

/// One ground-truth ordering of region sets.
struct OrderingExample {
  std::vector<RegionSet> sorted;
};

inline std::vector<OrderingExample> ordering_examples(const Corpus& corpus, std::size_t min_size, std::size_t max_size) {
  std::vector<OrderingExample> out;
  for (const auto& im : corpus.images)
    for (const auto& cap : im.captions) {
      if (cap.chunks.size() < min_size || cap.chunks.size() > max_size) continue;
      out.push_back({im.control_of(cap).sets});
    }
  return out;
}

struct ScrambledExample {
  std::vector<RegionSet> scrambled;
  std::vector<int> truth;  // truth[k] = scrambled index of the set at position k
};

inline ScrambledExample scramble(const OrderingExample& ex, Rng& rng) {
  const auto perm = rng.permutation(ex.sorted.size());  // scrambled slot i holds sorted item perm[i]
  ScrambledExample s;
  s.truth.assign(perm.size(), 0);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    s.scrambled.push_back(ex.sorted[perm[i]]);
    s.truth[perm[i]] = static_cast<int>(i);
  }
  return s;
}

struct SorterEval {
  double accuracy = 0.0;
  double tau = 0.0;
  double identity_accuracy = 0.0;
  double identity_tau = 0.0;
  std::size_t n = 0;
};

/// Scores the sorter and the keep-input-order baseline on seeded scrambles
/// of every ordering with 2..max_size sets.
inline SorterEval evaluate_sorter(const SortNetParams& p, const Corpus& corpus, std::uint64_t seed,
                                  std::size_t max_size) {
  Rng rng(seed);
  SorterEval e;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs, ident;
  double tau = 0.0, itau = 0.0;
  for (const auto& ex : ordering_examples(corpus, 2, std::min(max_size, p.config.n_max))) {
    const auto s = scramble(ex, rng);
    const auto r = sort_control(p, s.scrambled);
    std::vector<int> pred(r.order.begin(), r.order.end());
    std::vector<int> id(s.truth.size());
    for (std::size_t i = 0; i < id.size(); ++i) id[i] = static_cast<int>(i);
    tau += kendall_tau(pred, s.truth);
    itau += kendall_tau(id, s.truth);
    pairs.emplace_back(std::move(pred), s.truth);
    ident.emplace_back(std::move(id), s.truth);
  }
  e.n = pairs.size();
  if (e.n == 0) return e;
  e.accuracy = ranking_accuracy(pairs);
  e.identity_accuracy = ranking_accuracy(ident);
  e.tau = tau / static_cast<double>(e.n);
  e.identity_tau = itau / static_cast<double>(e.n);
  return e;
}

struct SortTrainConfig {
  double lr = 1e-2;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  std::size_t patience = 0;  // 0 disables early stopping
  std::size_t max_set_size = kMaxControlLength;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("sorter lr must be positive");
    if (batch_size == 0) throw ConfigError("sorter batch_size must be positive");
  }
};

struct SortTrainResult {
  SortNetParams params;
  std::size_t epochs_run = 0;
  double best_val_accuracy = 0.0;
};

/// Adam on the Sinkhorn MSE. Keeps the parameters with the best validation
/// ranking accuracy when a validation corpus is given.
inline SortTrainResult train_sorter(const SortNetParams& init, const Corpus& train, const Corpus* val,
                                    const SortTrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  SortTrainResult res{init.clone(), 0, 0.0};
  if (cfg.epochs == 0) return res;
  SortNetParams p = init.clone();
  const auto examples = ordering_examples(train, 2, std::min(cfg.max_set_size, p.config.n_max));
  if (examples.empty()) throw UsageError("train_sorter: no orderings with 2..n_max sets in the training corpus");
  Rng rng(cfg.seed);
  Adam adam;
  auto params = p.named();
  double best = -1.0;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = rng.permutation(examples.size());
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      zero_grads(params);
      for (std::size_t i = b; i < end; ++i) {
        const auto s = scramble(examples[order[i]], rng);
        const Tensor loss = scale(sorter_loss(p, s.scrambled, examples[order[i]].sorted), 1.0 / static_cast<double>(end - b));
        total += loss.item() * static_cast<double>(end - b);
        backward(loss);
      }
      adam.step(params, cfg.lr);
    }
    res.epochs_run = epoch + 1;
    nlohmann::json row = {{"epoch", epoch}, {"split", "train"}, {"sort_mse", total / static_cast<double>(examples.size())}};
    if (val != nullptr) {
      const auto ev = evaluate_sorter(p, *val, cfg.seed + 1, cfg.max_set_size);
      row["val_accuracy"] = ev.accuracy;
      row["val_tau"] = ev.tau;
      if (ev.accuracy > best) {
        best = ev.accuracy;
        since_best = 0;
        res.params = p.clone();
        res.best_val_accuracy = best;
      } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
        if (log) *log << row.dump() << "\n";
        break;
      }
    } else {
      res.params = p.clone();
    }
    if (log) *log << row.dump() << "\n";
  }
  return res;
}

}  // namespace ctrlcap
