#pragma once

// Corpus-level scoring. References are grouped by (image, control): every
// caption of an image whose chunk sets match the same ordered index lists
// is a reference for that control.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ctrlcap/data.hpp"
#include "ctrlcap/decoder.hpp"
#include "ctrlcap/metrics.hpp"
#include "ctrlcap/sorter.hpp"

namespace ctrlcap {

struct ReferenceGroup {
  std::size_t image_index = 0;
  std::vector<std::vector<int>> sets;  // ordered region index lists
  std::vector<TokenSeq> refs;
  std::vector<std::size_t> caption_indices;
};

inline std::vector<ReferenceGroup> reference_groups(const Corpus& corpus) {
  std::vector<ReferenceGroup> groups;
  for (std::size_t i = 0; i < corpus.images.size(); ++i) {
    std::map<std::vector<std::vector<int>>, std::size_t> at;
    for (std::size_t c = 0; c < corpus.images[i].captions.size(); ++c) {
      const auto& cap = corpus.images[i].captions[c];
      std::vector<std::vector<int>> key;
      for (const auto& ch : cap.chunks) key.push_back(ch.regions);
      auto [it, fresh] = at.emplace(key, groups.size());
      if (fresh) groups.push_back({i, key, {}, {}});
      groups[it->second].refs.push_back(cap.tokens);
      groups[it->second].caption_indices.push_back(c);
    }
  }
  return groups;
}

inline CiderStats cider_stats(const std::vector<ReferenceGroup>& groups) {
  std::vector<std::vector<TokenSeq>> refs;
  for (const auto& g : groups) refs.push_back(g.refs);
  return CiderStats(refs);
}

/// Alignment quality of one candidate against a reference group: NW and IoU
/// take the best reference.
struct CandidateScores {
  double cider_d = 0.0;
  double nw = 0.0;
  double iou = 0.0;
};

inline CandidateScores score_candidate(const TokenSeq& cand, const std::vector<TokenSeq>& refs, const CiderStats& stats,
                                       const Lexicon& lex) {
  CandidateScores s;
  s.cider_d = cider_d(cand, refs, stats);
  s.nw = -1.0;
  s.iou = 0.0;
  for (const auto& r : refs) {
    s.nw = std::max(s.nw, nw_score(cand, r, lex));
    s.iou = std::max(s.iou, soft_iou(cand, r, lex));
  }
  return s;
}

struct EvalOptions {
  std::size_t beam = 1;  // 1 = greedy
  std::size_t max_len = kDefaultMaxLen;
  std::uint64_t seed = 1;  // scrambling in set mode
};

struct EvalRow {
  std::string image_id;
  std::vector<std::vector<int>> control;  // as decoded
  std::string caption;
  CandidateScores scores;
  std::optional<double> tau;
  std::optional<bool> correct;
};

struct EvalReport {
  std::string mode;
  double cider_d = 0.0;
  double nw = 0.0;
  double iou = 0.0;
  std::optional<double> tau;
  std::optional<double> accuracy;
  std::vector<EvalRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mode"] = mode;
    j["n"] = rows.size();
    j["cider_d"] = cider_d;
    j["nw"] = nw;
    j["iou"] = iou;
    j["tau"] = tau ? nlohmann::json(*tau) : nlohmann::json(nullptr);
    j["accuracy"] = accuracy ? nlohmann::json(*accuracy) : nlohmann::json(nullptr);
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json row = {{"image_id", r.image_id}, {"control", r.control}, {"caption", r.caption},
                            {"cider_d", r.scores.cider_d}, {"nw", r.scores.nw}, {"iou", r.scores.iou}};
      if (r.tau) row["tau"] = *r.tau;
      if (r.correct) row["correct"] = *r.correct;
      j["rows"].push_back(std::move(row));
    }
    return j;
  }
};

inline DecodeResult decode(const ModelParams& p, const std::vector<double>& desc, const ControlSignal& control,
                           const EvalOptions& opt) {
  if (opt.beam <= 1) return greedy_decode(p, desc, control, opt.max_len);
  return beam_decode(p, desc, control, opt.beam, opt.max_len).front();
}

namespace detail {

inline void finish_report(EvalReport& rep) {
  if (rep.rows.empty()) return;
  const double n = static_cast<double>(rep.rows.size());
  for (const auto& r : rep.rows) {
    rep.cider_d += r.scores.cider_d / n;
    rep.nw += r.scores.nw / n;
    rep.iou += r.scores.iou / n;
  }
}

}  // namespace detail

/// Controllability with respect to a sequence: decode under each reference
/// group's own control.
inline EvalReport evaluate_sequence(const ModelParams& p, const Corpus& corpus, const EvalOptions& opt = {}) {
  EvalReport rep;
  rep.mode = "sequence";
  const auto groups = reference_groups(corpus);
  const auto stats = cider_stats(groups);
  const Lexicon& lex = *corpus.lexicon;
  for (const auto& g : groups) {
    const Image& im = corpus.images[g.image_index];
    const auto out = decode(p, im.descriptor(), im.control(g.sets), opt);
    rep.rows.push_back({im.id, g.sets, lex.join(out.tokens), score_candidate(out.tokens, g.refs, stats, lex), {}, {}});
  }
  detail::finish_report(rep);
  return rep;
}

/// Controllability with respect to a set: scramble each control, order it
/// with the sorter, then decode.
inline EvalReport evaluate_set(const ModelParams& p, const SortNetParams& sorter, const Corpus& corpus,
                               const EvalOptions& opt = {}) {
  EvalReport rep;
  rep.mode = "set";
  const auto groups = reference_groups(corpus);
  const auto stats = cider_stats(groups);
  const Lexicon& lex = *corpus.lexicon;
  Rng rng(opt.seed);
  std::vector<std::pair<std::vector<int>, std::vector<int>>> rankings;
  double tau_sum = 0.0;
  for (const auto& g : groups) {
    const Image& im = corpus.images[g.image_index];
    const auto s = scramble(OrderingExample{im.control(g.sets).sets}, rng);
    const auto sorted = sort_control(sorter, s.scrambled);
    const auto out = decode(p, im.descriptor(), sorted.control, opt);
    std::vector<int> pred(sorted.order.begin(), sorted.order.end());
    EvalRow row{im.id, sorted.control.index_lists(), lex.join(out.tokens),
                score_candidate(out.tokens, g.refs, stats, lex), kendall_tau(pred, s.truth), pred == s.truth};
    tau_sum += *row.tau;
    rankings.emplace_back(std::move(pred), s.truth);
    rep.rows.push_back(std::move(row));
  }
  detail::finish_report(rep);
  if (!rep.rows.empty()) {
    rep.tau = tau_sum / static_cast<double>(rep.rows.size());
    rep.accuracy = ranking_accuracy(rankings);
  }
  return rep;
}

/// Grounding trace: one line per decoded chunk, "chunk_text -> set_index
/// [region indices]". The words up to a fired gate (or <eos>) form a span;
/// its chunk is the trailing run of determiners, adjectives and nouns.
inline std::vector<std::string> grounding_trace(const DecodeResult& r, const ControlSignal& control, const Lexicon& lex) {
  std::vector<std::string> lines;
  std::vector<int> words;
  std::size_t pointer = 0;
  const auto emit = [&] {
    std::size_t first = words.size();
    while (first > 0 && lex.is_chunk_word(words[first - 1])) --first;
    words.erase(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(first));
    if (words.empty()) return;
    const std::size_t idx = std::min(pointer, control.size() - 1);
    std::string regions = "[";
    const auto& ind = control.sets[idx].indices;
    for (std::size_t i = 0; i < ind.size(); ++i) regions += (i ? "," : "") + std::to_string(ind[i]);
    lines.push_back(lex.join(words) + " -> " + std::to_string(idx) + " " + regions + "]");
    words.clear();
  };
  for (std::size_t t = 0; t < r.tokens.size(); ++t) {
    if (r.tokens[t] == Lexicon::kEos) break;
    words.push_back(r.tokens[t]);
    if (r.gates[t]) {
      emit();
      pointer = std::min(pointer + 1, control.size());
    }
  }
  emit();
  return lines;
}

}  // namespace ctrlcap
