#pragma once

// Two-layer recurrent captioner steered by a sequence of region sets.
//
// Layer 1 reads [word embedding; image descriptor; h2_{t-1}] and, from its
// state, derives a chunk sentinel and a visual sentinel. The chunk sentinel
// competes with the regions of the current set in one softmax whose sentinel
// mass is the probability of moving to the next set. The visual sentinel and
// the same regions form the attention distribution that yields the context
// vector. Layer 2 reads [context; h1] and predicts the next word.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctrlcap/data.hpp"
#include "ctrlcap/error.hpp"
#include "ctrlcap/optim.hpp"
#include "ctrlcap/rng.hpp"
#include "ctrlcap/tensor.hpp"

namespace ctrlcap {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 1000;
  std::size_t feat_dim = 64;
  std::size_t hidden = 1000;
  std::size_t att_dim = 512;
  double init_range = 0.08;
  std::uint64_t seed = 1;

  std::size_t layer1_input() const { return embed_dim + feat_dim + hidden; }

  void validate() const {
    if (vocab_size < 3) throw ConfigError("vocabulary must contain <bos>, <eos> and at least one word");
    if (embed_dim == 0 || feat_dim == 0 || hidden == 0 || att_dim == 0)
      throw ConfigError("model dimensions must be positive");
    if (!(init_range > 0)) throw ConfigError("init_range must be positive");
  }
};

struct ModelParams {
  ModelConfig config;

  Tensor embed;                       // V x E
  Tensor lstm1_wx, lstm1_wh, lstm1_b;  // 4d x k, 4d x d, 4d
  Tensor w_ig, w_hg;                  // chunk sentinel gate: d x k, d x d
  Tensor w_is, w_hs;                  // visual sentinel gate: d x k, d x d
  Tensor w_sg, w_ss, w_sr, w_g;       // attention projections: A x d, A x d, A x F, A x d
  Tensor w_h;                         // A
  Tensor w_rv, w_sv;                  // value projections: d x F, d x d
  Tensor lstm2_wx, lstm2_wh, lstm2_b;  // 4d x 2d, 4d x d, 4d
  Tensor out_w, out_b;                // V x d, V

  /// Uniform [-init_range, init_range] weights, zero biases.
  static ModelParams init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const auto V = cfg.vocab_size, E = cfg.embed_dim, F = cfg.feat_dim, d = cfg.hidden, A = cfg.att_dim;
    const auto k = cfg.layer1_input();
    const auto uni = [&](Shape s) {
      std::vector<double> v(shape_numel(s));
      for (auto& x : v) x = rng.uniform(-cfg.init_range, cfg.init_range);
      return Tensor::from(std::move(s), std::move(v), true);
    };
    const auto zero = [](Shape s) { return Tensor::zeros(std::move(s), true); };
    ModelParams p;
    p.config = cfg;
    p.embed = uni({V, E});
    p.lstm1_wx = uni({4 * d, k});
    p.lstm1_wh = uni({4 * d, d});
    p.lstm1_b = zero({4 * d});
    p.w_ig = uni({d, k});
    p.w_hg = uni({d, d});
    p.w_is = uni({d, k});
    p.w_hs = uni({d, d});
    p.w_sg = uni({A, d});
    p.w_ss = uni({A, d});
    p.w_sr = uni({A, F});
    p.w_g = uni({A, d});
    p.w_h = uni({A});
    p.w_rv = uni({d, F});
    p.w_sv = uni({d, d});
    p.lstm2_wx = uni({4 * d, 2 * d});
    p.lstm2_wh = uni({4 * d, d});
    p.lstm2_b = zero({4 * d});
    p.out_w = uni({V, d});
    p.out_b = zero({V});
    return p;
  }

  /// Handles aliasing the parameter tensors, in a fixed order.
  NamedParams named() const {
    return {{"embed", embed},       {"lstm1_wx", lstm1_wx}, {"lstm1_wh", lstm1_wh}, {"lstm1_b", lstm1_b},
            {"w_ig", w_ig},         {"w_hg", w_hg},         {"w_is", w_is},         {"w_hs", w_hs},
            {"w_sg", w_sg},         {"w_ss", w_ss},         {"w_sr", w_sr},         {"w_g", w_g},
            {"w_h", w_h},           {"w_rv", w_rv},         {"w_sv", w_sv},         {"lstm2_wx", lstm2_wx},
            {"lstm2_wh", lstm2_wh}, {"lstm2_b", lstm2_b},   {"out_w", out_w},       {"out_b", out_b}};
  }

  /// Deep copy with fresh leaves.
  ModelParams clone() const {
    ModelParams p = *this;
    auto src = named();
    auto dst = p.named_mut();
    for (std::size_t i = 0; i < src.size(); ++i)
      *dst[i] = Tensor::from(src[i].second.shape(), src[i].second.to_vector(), true);
    return p;
  }

  std::vector<Tensor*> named_mut() {
    return {&embed, &lstm1_wx, &lstm1_wh, &lstm1_b, &w_ig, &w_hg,     &w_is,     &w_hs,    &w_sg,  &w_ss,
            &w_sr,  &w_g,      &w_h,      &w_rv,    &w_sv, &lstm2_wx, &lstm2_wh, &lstm2_b, &out_w, &out_b};
  }
};

/// Region features of one set, stacked as rows (n x F).
inline Tensor region_matrix(const RegionSet& set) {
  if (set.regions.empty()) throw UsageError("region set is empty");
  const std::size_t F = set.regions[0].feat.size();
  std::vector<double> v;
  v.reserve(set.size() * F);
  for (const auto& r : set.regions) {
    if (r.feat.size() != F) throw DimensionError("region features of differing dimension in one set");
    v.insert(v.end(), r.feat.begin(), r.feat.end());
  }
  return Tensor::from({set.size(), F}, std::move(v));
}

/// Per-set quantities that do not depend on the time step.
struct ProjectedSet {
  Tensor keys;     // n x A   (W_sr r_i for every region)
  Tensor values;   // d x n   (W_rv r_i as columns)
  std::size_t size = 0;
};

inline ProjectedSet project_set(const ModelParams& p, const Tensor& regions) {
  if (regions.rank() != 2 || regions.dim(1) != p.config.feat_dim)
    throw DimensionError("region matrix " + shape_str(regions.shape()) + " does not match feat_dim " +
                         std::to_string(p.config.feat_dim));
  ProjectedSet ps;
  ps.keys = matmul(regions, transpose(p.w_sr));
  ps.values = matmul(p.w_rv, transpose(regions));
  ps.size = regions.dim(0);
  return ps;
}

struct StepState {
  Tensor h1, m1, h2, m2;
  std::size_t pointer = 0;
  std::vector<int> gates_so_far;

  static StepState initial(const ModelConfig& cfg) {
    StepState s;
    s.h1 = Tensor::zeros({cfg.hidden});
    s.m1 = Tensor::zeros({cfg.hidden});
    s.h2 = Tensor::zeros({cfg.hidden});
    s.m2 = Tensor::zeros({cfg.hidden});
    return s;
  }
};

struct StepOutput {
  Tensor word_logprobs;  // V, log-simplex
  Tensor gate_dist;      // n+1: [chunk sentinel; regions], shared softmax
  Tensor gate_prob;      // scalar, gate_dist[0]
  Tensor attention;      // n+1: [regions; visual sentinel]
  Tensor context;        // d
};

namespace detail {

inline std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h_prev, const Tensor& m_prev,
                                           const Tensor& wx, const Tensor& wh, const Tensor& b, std::size_t d) {
  const Tensor pre = add(add(matmul(wx, x), matmul(wh, h_prev)), b);
  const Tensor i = sigmoid(slice(pre, 0, d));
  const Tensor f = sigmoid(slice(pre, d, d));
  const Tensor g = tanh(slice(pre, 2 * d, d));
  const Tensor o = sigmoid(slice(pre, 3 * d, d));
  const Tensor m = add(mul(f, m_prev), mul(i, g));
  const Tensor h = mul(o, tanh(m));
  return {h, m};
}

inline Tensor score(const Tensor& w_h_row, const Tensor& v) { return matmul(w_h_row, tanh(v)); }

}  // namespace detail

/// One decoding step. The returned state carries the new recurrent tensors;
/// the region pointer is left for advance_pointer().
inline std::pair<StepOutput, StepState> step(const ModelParams& p, const StepState& state, int word_in,
                                             const ProjectedSet& set, const Tensor& image_desc) {
  const auto& cfg = p.config;
  if (word_in < 0 || static_cast<std::size_t>(word_in) >= cfg.vocab_size)
    throw UsageError("token id " + std::to_string(word_in) + " outside vocabulary of size " +
                     std::to_string(cfg.vocab_size));
  if (set.size == 0) throw UsageError("step: empty region set");
  const std::size_t d = cfg.hidden, A = cfg.att_dim;

  const Tensor x = concat({row(p.embed, static_cast<std::size_t>(word_in)), image_desc, state.h2});
  auto [h1, m1] = detail::lstm_cell(x, state.h1, state.m1, p.lstm1_wx, p.lstm1_wh, p.lstm1_b, d);
  const Tensor tm1 = tanh(m1);

  // Sentinels read the previous hidden state and the current memory.
  const Tensor chunk_sentinel = mul(sigmoid(add(matmul(p.w_ig, x), matmul(p.w_hg, state.h1))), tm1);
  const Tensor visual_sentinel = mul(sigmoid(add(matmul(p.w_is, x), matmul(p.w_hs, state.h1))), tm1);

  const Tensor wh_row = reshape(p.w_h, {1, A});
  const Tensor query = matmul(p.w_g, h1);
  const Tensor z_chunk = detail::score(wh_row, add(matmul(p.w_sg, chunk_sentinel), query));
  const Tensor z_regions = matmul(tanh(add_rowwise(set.keys, query)), p.w_h);
  const Tensor z_visual = detail::score(wh_row, add(matmul(p.w_ss, visual_sentinel), query));

  StepOutput out;
  out.gate_dist = softmax(concat({z_chunk, z_regions}));
  out.gate_prob = index(out.gate_dist, 0);
  out.attention = softmax(concat({z_regions, z_visual}));

  const Tensor sentinel_value = reshape(matmul(p.w_sv, visual_sentinel), {d, 1});
  out.context = matmul(concat_cols({set.values, sentinel_value}), out.attention);

  auto [h2, m2] = detail::lstm_cell(concat({out.context, h1}), state.h2, state.m2, p.lstm2_wx, p.lstm2_wh,
                                    p.lstm2_b, d);
  out.word_logprobs = log_softmax(add(matmul(p.out_w, h2), p.out_b));

  StepState next;
  next.h1 = h1;
  next.m1 = m1;
  next.h2 = h2;
  next.m2 = m2;
  next.pointer = state.pointer;
  next.gates_so_far = state.gates_so_far;
  return {std::move(out), std::move(next)};
}

/// Pointer after a gate: min(number of fired gates, N).
inline StepState advance_pointer(StepState state, bool gate, const ControlSignal& control) {
  state.gates_so_far.push_back(gate ? 1 : 0);
  if (gate) state.pointer = std::min(state.pointer + 1, control.size());
  return state;
}

/// Inputs that stay fixed over one caption.
struct Conditioning {
  Tensor image_desc;
  std::vector<ProjectedSet> sets;

  const ProjectedSet& at_pointer(std::size_t pointer) const { return sets.at(std::min(pointer, sets.size() - 1)); }
};

inline Conditioning condition(const ModelParams& p, const std::vector<double>& image_desc,
                              const ControlSignal& control) {
  if (control.sets.empty()) throw UsageError("control signal is empty");
  if (control.size() > kMaxControlLength) throw UsageError("control signal longer than 10 sets");
  if (image_desc.size() != p.config.feat_dim)
    throw DimensionError("image descriptor has dimension " + std::to_string(image_desc.size()) + ", expected " +
                         std::to_string(p.config.feat_dim));
  Conditioning c;
  c.image_desc = Tensor::vector(image_desc);
  for (const auto& s : control.sets) c.sets.push_back(project_set(p, region_matrix(s)));
  return c;
}

/// Runs the model over a fixed token sequence with the region pointer driven
/// by a fixed gate sequence. Output t predicts tokens[t] from tokens[t-1]
/// (or <bos>) under the set selected by gates[0..t-1].
inline std::vector<StepOutput> forced_pass(const ModelParams& p, const std::vector<double>& image_desc,
                                           const ControlSignal& control, const std::vector<int>& tokens,
                                           const std::vector<int>& gates) {
  if (tokens.size() != gates.size()) throw UsageError("forced_pass: tokens and gates differ in length");
  const Conditioning cond = condition(p, image_desc, control);
  StepState state = StepState::initial(p.config);
  std::vector<StepOutput> outs;
  outs.reserve(tokens.size());
  int word = Lexicon::kBos;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto [out, next] = step(p, state, word, cond.at_pointer(state.pointer), cond.image_desc);
    outs.push_back(std::move(out));
    state = advance_pointer(std::move(next), gates[t] != 0, control);
    word = tokens[t];
  }
  return outs;
}

/// Teacher forcing on a corpus sample: ground-truth previous words and
/// ground-truth region sets.
inline std::vector<StepOutput> teacher_forced_pass(const ModelParams& p, const Sample& sample) {
  return forced_pass(p, sample.image_desc, sample.control, sample.caption.tokens, sample.caption.gates);
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace ctrlcap
