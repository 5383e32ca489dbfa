#pragma once

// Cross-entropy pretraining over words and gates, then self-critical policy
// gradient with the greedy decode as baseline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <vector>

#include "json.hpp"

#include "ctrlcap/data.hpp"
#include "ctrlcap/decoder.hpp"
#include "ctrlcap/evaluate.hpp"
#include "ctrlcap/metrics.hpp"
#include "ctrlcap/model.hpp"
#include "ctrlcap/optim.hpp"
#include "ctrlcap/rng.hpp"

namespace ctrlcap {

struct TrainConfig {
  double lr_xe = 5e-4;
  double lr_decay = 0.8;  // per XE epoch
  double lr_rl = 5e-5;
  std::size_t batch_size = 100;
  double word_weight = 0.2;
  double gate_weight = 0.8;
  double lambda_cider = 1.0;
  double lambda_nw = 2.0;
  double clip_norm = 5.0;     // RL phase
  double xe_clip_norm = 0.0;  // 0 disables
  std::size_t xe_epochs = 30;
  std::size_t patience = 5;  // 0 disables early stopping
  std::size_t rl_steps = 0;
  std::size_t max_len = kDefaultMaxLen;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lr_xe > 0) || !(lr_rl > 0)) throw ConfigError("learning rates must be positive");
    if (!(lr_decay > 0) || lr_decay > 1) throw ConfigError("lr_decay must be in (0,1]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (word_weight < 0 || gate_weight < 0 || lambda_cider < 0 || lambda_nw < 0)
      throw ConfigError("loss and reward weights must be nonnegative");
    if (clip_norm < 0 || xe_clip_norm < 0) throw ConfigError("clip norms must be nonnegative");
    if (max_len == 0) throw ConfigError("max_len must be positive");
  }
};

// ---------------------------------------------------------------------------
// Cross-entropy

/// -(1/T) sum_t [w_word log p(y*_t) + w_gate (g*_t log p_t + (1-g*_t) log(1-p_t))]
/// with gate probabilities clamped at 1e-12 before the log.
inline Tensor xe_loss(const std::vector<StepOutput>& outs, const GroundedCaption& cap, double word_weight = 0.2,
                      double gate_weight = 0.8) {
  if (outs.size() != cap.tokens.size() || cap.gates.size() != cap.tokens.size())
    throw UsageError("xe_loss: outputs and caption differ in length");
  if (outs.empty()) throw UsageError("xe_loss: empty caption");
  std::vector<Tensor> terms;
  terms.reserve(2 * outs.size());
  for (std::size_t t = 0; t < outs.size(); ++t) {
    terms.push_back(scale(index(outs[t].word_logprobs, static_cast<std::size_t>(cap.tokens[t])), word_weight));
    const Tensor& pg = outs[t].gate_prob;
    const Tensor lg = cap.gates[t] ? log_clamped(pg, kProbFloor) : log_clamped(add_scalar(neg(pg), 1.0), kProbFloor);
    terms.push_back(scale(lg, gate_weight));
  }
  return scale(sum(concat(terms)), -1.0 / static_cast<double>(outs.size()));
}

struct TeacherForcedStats {
  double xe_loss = 0.0;  // mean over samples
  std::size_t tokens = 0;
  std::size_t token_correct = 0;
  std::size_t gate_correct = 0;

  double token_acc() const { return tokens ? static_cast<double>(token_correct) / static_cast<double>(tokens) : 0.0; }
  double gate_acc() const { return tokens ? static_cast<double>(gate_correct) / static_cast<double>(tokens) : 0.0; }
};

inline void count_correct(const std::vector<StepOutput>& outs, const GroundedCaption& cap, TeacherForcedStats& s) {
  for (std::size_t t = 0; t < outs.size(); ++t) {
    s.token_correct += static_cast<int>(argmax(outs[t].word_logprobs.data())) == cap.tokens[t];
    s.gate_correct += (outs[t].gate_prob.item() > 0.5) == (cap.gates[t] != 0);
    ++s.tokens;
  }
}

inline TeacherForcedStats teacher_forced_stats(const ModelParams& p, const std::vector<Sample>& samples,
                                               const TrainConfig& cfg) {
  NoGradGuard no_grad;
  TeacherForcedStats s;
  for (const auto& smp : samples) {
    const auto outs = teacher_forced_pass(p, smp);
    s.xe_loss += xe_loss(outs, smp.caption, cfg.word_weight, cfg.gate_weight).item();
    count_correct(outs, smp.caption, s);
  }
  if (!samples.empty()) s.xe_loss /= static_cast<double>(samples.size());
  return s;
}

/// One pass over the samples in seeded random order. Reported statistics are
/// taken from the forward passes before each update.
inline TeacherForcedStats xe_epoch(ModelParams& p, Adam& adam, const std::vector<Sample>& samples,
                                   const TrainConfig& cfg, double lr, Rng& rng) {
  TeacherForcedStats s;
  auto params = p.named();
  const auto order = rng.permutation(samples.size());
  for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), b + cfg.batch_size);
    zero_grads(params);
    for (std::size_t i = b; i < end; ++i) {
      const Sample& smp = samples[order[i]];
      const auto outs = teacher_forced_pass(p, smp);
      const Tensor loss = xe_loss(outs, smp.caption, cfg.word_weight, cfg.gate_weight);
      s.xe_loss += loss.item();
      count_correct(outs, smp.caption, s);
      backward(scale(loss, 1.0 / static_cast<double>(end - b)));
    }
    if (cfg.xe_clip_norm > 0) clip_grad_norm(params, cfg.xe_clip_norm);
    adam.step(params, lr);
  }
  if (!samples.empty()) s.xe_loss /= static_cast<double>(samples.size());
  return s;
}

// ---------------------------------------------------------------------------
// Rewards

/// lambda_cider * CIDEr-D(candidate, refs) + lambda_nw * max_ref NW(candidate, ref).
class RewardFunction {
 public:
  RewardFunction(CiderStats stats, const Lexicon& lex, double lambda_cider, double lambda_nw)
      : stats_(std::move(stats)), lex_(&lex), lambda_cider_(lambda_cider), lambda_nw_(lambda_nw) {}

  double operator()(const TokenSeq& cand, const std::vector<TokenSeq>& refs) const {
    if (refs.empty()) throw UsageError("reward: no references");
    double r = 0.0;
    if (lambda_cider_ != 0.0) r += lambda_cider_ * cider_d(cand, refs, stats_);
    if (lambda_nw_ != 0.0) {
      double best = -1.0;
      for (const auto& ref : refs) best = std::max(best, nw_score(cand, ref, *lex_));
      r += lambda_nw_ * best;
    }
    if (!std::isfinite(r)) throw NumericError("reward is not finite for candidate '" + lex_->join(cand) + "'");
    return r;
  }

  const CiderStats& stats() const { return stats_; }

 private:
  CiderStats stats_;
  const Lexicon* lex_;
  double lambda_cider_;
  double lambda_nw_;
};

// ---------------------------------------------------------------------------
// Self-critical sequence training

struct ScstItem {
  std::vector<double> image_desc;
  ControlSignal control;
  std::vector<TokenSeq> refs;
};

inline std::vector<ScstItem> scst_items(const Corpus& corpus) {
  std::vector<ScstItem> items;
  for (const auto& g : reference_groups(corpus)) {
    const Image& im = corpus.images[g.image_index];
    items.push_back({im.descriptor(), im.control(g.sets), g.refs});
  }
  return items;
}

struct ScstStats {
  double sample_reward = 0.0;  // batch means
  double greedy_reward = 0.0;
  double advantage = 0.0;
  double grad_norm = 0.0;
};

/// Accumulates the gradient of -(1/B) sum A (log p(w^s) + log p(g^s)) into
/// the parameter gradients. Samples with zero advantage contribute nothing.
inline ScstStats scst_gradients(const ModelParams& p, const std::vector<const ScstItem*>& batch,
                                const RewardFunction& reward, Rng& rng, std::size_t max_len) {
  ScstStats s;
  const double inv = batch.empty() ? 0.0 : 1.0 / static_cast<double>(batch.size());
  for (const ScstItem* item : batch) {
    const auto sampled = sample_decode(p, item->image_desc, item->control, rng, max_len);
    const auto greedy = greedy_decode(p, item->image_desc, item->control, max_len);
    const double rs = reward(sampled.tokens, item->refs);
    const double rg = reward(greedy.tokens, item->refs);
    const double adv = rs - rg;
    s.sample_reward += rs * inv;
    s.greedy_reward += rg * inv;
    s.advantage += adv * inv;
    if (adv == 0.0) continue;
    const Tensor lp = sequence_logprob(p, item->image_desc, item->control, sampled.tokens, sampled.gates);
    backward(scale(lp, -adv * inv));
  }
  return s;
}

inline ScstStats scst_step(ModelParams& p, Adam& adam, const std::vector<const ScstItem*>& batch,
                           const RewardFunction& reward, Rng& rng, const TrainConfig& cfg) {
  auto params = p.named();
  zero_grads(params);
  ScstStats s = scst_gradients(p, batch, reward, rng, cfg.max_len);
  s.grad_norm = cfg.clip_norm > 0 ? clip_grad_norm(params, cfg.clip_norm) : grad_norm(params);
  adam.step(params, cfg.lr_rl);
  return s;
}

// ---------------------------------------------------------------------------
// Orchestration

struct TrainResult {
  ModelParams params;
  std::size_t epochs_run = 0;
  std::optional<double> best_val_cider;
};

namespace detail {

inline nlohmann::json log_row(std::size_t epoch, const char* split, const TeacherForcedStats& s,
                              const EvalReport* rep) {
  nlohmann::json j = {{"epoch", epoch},         {"split", split},           {"xe_loss", s.xe_loss},
                      {"token_acc", s.token_acc()}, {"gate_acc", s.gate_acc()}, {"cider_d", nullptr},
                      {"nw", nullptr},          {"iou", nullptr}};
  if (rep) {
    j["cider_d"] = rep->cider_d;
    j["nw"] = rep->nw;
    j["iou"] = rep->iou;
  }
  return j;
}

}  // namespace detail

/// XE epochs with lr_xe * lr_decay^epoch. With a validation corpus, each
/// epoch is followed by a greedy evaluation and the parameters with the best
/// validation CIDEr-D are returned; training stops after `patience` epochs
/// without improvement.
inline TrainResult train_xe(const ModelParams& init, const Corpus& train, const Corpus* val, const TrainConfig& cfg,
                            std::ostream* log = nullptr) {
  cfg.validate();
  TrainResult res{init.clone(), 0, std::nullopt};
  if (cfg.xe_epochs == 0) return res;
  ModelParams p = init.clone();
  const auto samples = train.samples();
  const auto val_samples = val ? val->samples() : std::vector<Sample>{};
  Rng rng(cfg.seed);
  Adam adam;
  double lr = cfg.lr_xe;
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.xe_epochs; ++epoch, lr *= cfg.lr_decay) {
    const auto st = xe_epoch(p, adam, samples, cfg, lr, rng);
    res.epochs_run = epoch + 1;
    if (log) *log << detail::log_row(epoch, "train", st, nullptr).dump() << "\n";
    if (val_samples.empty()) continue;
    const auto vst = teacher_forced_stats(p, val_samples, cfg);
    const auto rep = evaluate_sequence(p, *val, {1, cfg.max_len, cfg.seed});
    if (log) *log << detail::log_row(epoch, "val", vst, &rep).dump() << "\n";
    if (!res.best_val_cider || rep.cider_d > *res.best_val_cider) {
      res.best_val_cider = rep.cider_d;
      res.params = p.clone();
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  if (val_samples.empty()) res.params = p.clone();
  return res;
}

/// rl_steps SCST updates over seeded minibatches of (image, control) items.
/// Logs one row per step and, with a validation corpus, a final evaluation
/// row in the epoch schema.
inline TrainResult train_rl(const ModelParams& init, const Corpus& train, const Corpus* val, const TrainConfig& cfg,
                            std::ostream* log = nullptr) {
  cfg.validate();
  TrainResult res{init.clone(), 0, std::nullopt};
  if (cfg.rl_steps == 0) return res;
  ModelParams p = init.clone();
  const auto items = scst_items(train);
  if (items.empty()) throw UsageError("train_rl: empty training corpus");
  RewardFunction reward(cider_stats(reference_groups(train)), *train.lexicon, cfg.lambda_cider, cfg.lambda_nw);
  Rng rng(cfg.seed);
  Adam adam;
  std::vector<std::size_t> order = rng.permutation(items.size());
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < cfg.rl_steps; ++step) {
    std::vector<const ScstItem*> batch;
    for (std::size_t i = 0; i < std::min(cfg.batch_size, items.size()); ++i) {
      if (cursor == order.size()) {
        order = rng.permutation(items.size());
        cursor = 0;
      }
      batch.push_back(&items[order[cursor++]]);
    }
    const auto st = scst_step(p, adam, batch, reward, rng, cfg);
    if (log)
      *log << nlohmann::json{{"step", step},
                             {"split", "rl"},
                             {"sample_reward", st.sample_reward},
                             {"greedy_reward", st.greedy_reward},
                             {"advantage", st.advantage},
                             {"grad_norm", st.grad_norm}}
                  .dump()
           << "\n";
  }
  res.epochs_run = cfg.rl_steps;
  if (val && log) {
    const auto vst = teacher_forced_stats(p, val->samples(), cfg);
    const auto rep = evaluate_sequence(p, *val, {1, cfg.max_len, cfg.seed});
    *log << detail::log_row(cfg.rl_steps, "val", vst, &rep).dump() << "\n";
  }
  res.params = p.clone();
  return res;
}

}  // namespace ctrlcap
