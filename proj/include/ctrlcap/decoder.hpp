#pragma once

// Inference over the joint (word, gate) action space. A hypothesis scores
// log p(word) + log p(gate) per step; the gate is ignored on the step that
// emits <eos>. Finished hypotheses are ranked by log-prob divided by token
// count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <tuple>
#include <vector>

#include "ctrlcap/model.hpp"
#include "ctrlcap/rng.hpp"

namespace ctrlcap {

inline constexpr std::size_t kDefaultMaxLen = 30;
inline constexpr double kProbFloor = 1e-12;

struct DecodeResult {
  std::vector<int> tokens;
  std::vector<int> gates;
  double logprob = 0.0;

  double normalized() const { return tokens.empty() ? 0.0 : logprob / static_cast<double>(tokens.size()); }
  bool operator==(const DecodeResult& o) const { return tokens == o.tokens && gates == o.gates; }
};

inline double gate_logprob(double p_shift, bool gate) {
  return std::log(std::max(gate ? p_shift : 1.0 - p_shift, kProbFloor));
}

/// Best output word. <bos> only ever feeds the first step and is never emitted.
inline int best_word(std::span<const double> lp) {
  std::size_t best = lp.size();
  for (std::size_t i = 0; i < lp.size(); ++i)
    if (static_cast<int>(i) != Lexicon::kBos && (best == lp.size() || lp[i] > lp[best])) best = i;
  return static_cast<int>(best);
}

inline DecodeResult greedy_decode(const ModelParams& p, const std::vector<double>& image_desc,
                                  const ControlSignal& control, std::size_t max_len = kDefaultMaxLen) {
  NoGradGuard no_grad;
  const Conditioning cond = condition(p, image_desc, control);
  StepState state = StepState::initial(p.config);
  DecodeResult r;
  int word = Lexicon::kBos;
  for (std::size_t t = 0; t < max_len; ++t) {
    auto [out, next] = step(p, state, word, cond.at_pointer(state.pointer), cond.image_desc);
    const auto lp = out.word_logprobs.data();
    const int w = best_word(lp);
    r.tokens.push_back(w);
    r.logprob += lp[static_cast<std::size_t>(w)];
    if (w == Lexicon::kEos) {
      r.gates.push_back(0);
      break;
    }
    const double pg = out.gate_prob.item();
    const bool g = pg > 0.5;
    r.logprob += gate_logprob(pg, g);
    r.gates.push_back(g ? 1 : 0);
    state = advance_pointer(std::move(next), g, control);
    word = w;
  }
  return r;
}

namespace detail {

struct Hypothesis {
  DecodeResult result;
  StepState state;
};

struct Candidate {
  double score;
  std::size_t hyp;
  int word;
  int gate;
};

}  // namespace detail

/// Beam search of width B over (word, gate) pairs. The greedy path is always
/// part of the candidate pool, so the best returned score is never below the
/// greedy score and B = 1 reproduces greedy_decode.
inline std::vector<DecodeResult> beam_decode(const ModelParams& p, const std::vector<double>& image_desc,
                                             const ControlSignal& control, std::size_t beam = 5,
                                             std::size_t max_len = kDefaultMaxLen) {
  if (beam < 1) throw UsageError("beam width must be at least 1");
  NoGradGuard no_grad;
  const Conditioning cond = condition(p, image_desc, control);

  std::vector<detail::Hypothesis> active{{DecodeResult{}, StepState::initial(p.config)}};
  std::vector<DecodeResult> finished;
  for (std::size_t t = 0; t < max_len && !active.empty(); ++t) {
    std::vector<detail::Candidate> cands;
    std::vector<StepOutput> outs;
    std::vector<StepState> nexts;
    for (std::size_t h = 0; h < active.size(); ++h) {
      const auto& hyp = active[h];
      const int word = hyp.result.tokens.empty() ? Lexicon::kBos : hyp.result.tokens.back();
      auto [out, next] = step(p, hyp.state, word, cond.at_pointer(hyp.state.pointer), cond.image_desc);
      const auto lp = out.word_logprobs.data();
      const double pg = out.gate_prob.item();
      // Only the top-B words of a hypothesis can survive pruning.
      std::vector<int> words;
      for (std::size_t i = 0; i < lp.size(); ++i)
        if (static_cast<int>(i) != Lexicon::kBos) words.push_back(static_cast<int>(i));
      const std::size_t keep = std::min(beam, words.size());
      std::partial_sort(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(keep), words.end(),
                        [&](int a, int b) { return lp[static_cast<std::size_t>(a)] > lp[static_cast<std::size_t>(b)] ||
                                                   (lp[static_cast<std::size_t>(a)] == lp[static_cast<std::size_t>(b)] && a < b); });
      for (std::size_t i = 0; i < keep; ++i) {
        const int w = words[i];
        const double base = hyp.result.logprob + lp[static_cast<std::size_t>(w)];
        if (w == Lexicon::kEos) {
          cands.push_back({base, h, w, 0});
        } else {
          cands.push_back({base + gate_logprob(pg, false), h, w, 0});
          cands.push_back({base + gate_logprob(pg, true), h, w, 1});
        }
      }
      outs.push_back(std::move(out));
      nexts.push_back(std::move(next));
    }
    std::sort(cands.begin(), cands.end(), [](const detail::Candidate& a, const detail::Candidate& b) {
      return std::tie(b.score, a.hyp, a.word, a.gate) < std::tie(a.score, b.hyp, b.word, b.gate);
    });
    std::vector<detail::Hypothesis> next_active;
    for (std::size_t c = 0; c < cands.size() && c < beam; ++c) {
      const auto& cd = cands[c];
      detail::Hypothesis nh{active[cd.hyp].result, nexts[cd.hyp]};
      nh.result.tokens.push_back(cd.word);
      nh.result.gates.push_back(cd.gate);
      nh.result.logprob = cd.score;
      if (cd.word == Lexicon::kEos) {
        finished.push_back(std::move(nh.result));
      } else {
        nh.state = advance_pointer(std::move(nh.state), cd.gate != 0, control);
        next_active.push_back(std::move(nh));
      }
    }
    active = std::move(next_active);
  }
  for (auto& h : active) finished.push_back(std::move(h.result));

  auto greedy = greedy_decode(p, image_desc, control, max_len);
  if (std::find(finished.begin(), finished.end(), greedy) == finished.end()) finished.push_back(std::move(greedy));

  std::stable_sort(finished.begin(), finished.end(),
                   [](const DecodeResult& a, const DecodeResult& b) { return a.normalized() > b.normalized(); });
  if (finished.size() > beam) finished.resize(beam);
  return finished;
}

/// Multinomial word and Bernoulli gate sampling. logprob accumulates the
/// untempered log p(word) + log p(gate). temperature <= 0 means argmax.
inline DecodeResult sample_decode(const ModelParams& p, const std::vector<double>& image_desc,
                                  const ControlSignal& control, Rng& rng, std::size_t max_len = kDefaultMaxLen,
                                  double temperature = 1.0) {
  if (temperature <= 0.0) return greedy_decode(p, image_desc, control, max_len);
  NoGradGuard no_grad;
  const Conditioning cond = condition(p, image_desc, control);
  StepState state = StepState::initial(p.config);
  DecodeResult r;
  int word = Lexicon::kBos;
  for (std::size_t t = 0; t < max_len; ++t) {
    auto [out, next] = step(p, state, word, cond.at_pointer(state.pointer), cond.image_desc);
    const auto lp = out.word_logprobs.data();
    const double mx = *std::max_element(lp.begin(), lp.end());
    std::vector<double> probs(lp.size());
    double z = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i)
      if (static_cast<int>(i) != Lexicon::kBos) z += (probs[i] = std::exp((lp[i] - mx) / temperature));
    double u = rng.uniform() * z;
    std::size_t w = 0;
    for (; w + 1 < probs.size(); ++w) {
      if (u < probs[w]) break;
      u -= probs[w];
    }
    r.tokens.push_back(static_cast<int>(w));
    r.logprob += lp[w];
    if (static_cast<int>(w) == Lexicon::kEos) {
      r.gates.push_back(0);
      break;
    }
    const double pg = out.gate_prob.item();
    double pt = pg;
    if (temperature != 1.0) {
      const double a = std::pow(pg, 1.0 / temperature), b = std::pow(1.0 - pg, 1.0 / temperature);
      pt = a + b > 0 ? a / (a + b) : 0.5;
    }
    const bool g = rng.bernoulli(pt);
    r.logprob += gate_logprob(pg, g);
    r.gates.push_back(g ? 1 : 0);
    state = advance_pointer(std::move(next), g, control);
    word = static_cast<int>(w);
  }
  return r;
}

/// Differentiable log p(words) + log p(gates) of a fixed action sequence,
/// using the same conventions as the decoders.
inline Tensor sequence_logprob(const ModelParams& p, const std::vector<double>& image_desc,
                               const ControlSignal& control, const std::vector<int>& tokens,
                               const std::vector<int>& gates) {
  const auto outs = forced_pass(p, image_desc, control, tokens, gates);
  std::vector<Tensor> terms;
  for (std::size_t t = 0; t < outs.size(); ++t) {
    terms.push_back(index(outs[t].word_logprobs, static_cast<std::size_t>(tokens[t])));
    if (tokens[t] == Lexicon::kEos) continue;
    const Tensor& pg = outs[t].gate_prob;
    terms.push_back(gates[t] ? log_clamped(pg, kProbFloor) : log_clamped(add_scalar(neg(pg), 1.0), kProbFloor));
  }
  return sum(concat(terms));
}

}  // namespace ctrlcap
