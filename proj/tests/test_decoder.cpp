#include <gtest/gtest.h>

#include <cmath>
#include <regex>

#include "ctrlcap/ctrlcap.hpp"

using namespace ctrlcap;

namespace {

struct Fixture {
  Corpus corpus;
  ModelParams params;
  std::vector<Sample> samples;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.corpus = generate_corpus(21, 4, GrammarConfig::standard());
    ModelConfig mc;
    mc.vocab_size = x.corpus.lexicon->size();
    mc.embed_dim = 8;
    mc.feat_dim = x.corpus.lexicon->feat_dim;
    mc.hidden = 12;
    mc.att_dim = 8;
    mc.init_range = 0.3;
    mc.seed = 5;
    x.params = ModelParams::init(mc);
    x.samples = x.corpus.samples();
    return x;
  }();
  return f;
}

}  // namespace

TEST(Greedy, BestWordSkipsBos) {
  EXPECT_EQ(best_word(std::vector<double>{0.0, -3.0, -1.0}), 2);
  EXPECT_EQ(best_word(std::vector<double>{-5.0, -1.0, -1.0}), 1);
}

TEST(Greedy, EachStepTakesTheArgmaxAction) {
  const auto& f = fixture();
  for (const auto& s : f.samples) {
    const auto r = greedy_decode(f.params, s.image_desc, s.control, 12);
    ASSERT_EQ(r.tokens.size(), r.gates.size());
    NoGradGuard ng;
    const auto outs = forced_pass(f.params, s.image_desc, s.control, r.tokens, r.gates);
    double lp = 0.0;
    for (std::size_t t = 0; t < outs.size(); ++t) {
      EXPECT_EQ(r.tokens[t], best_word(outs[t].word_logprobs.data()));
      EXPECT_NE(r.tokens[t], Lexicon::kBos);
      lp += outs[t].word_logprobs.at(static_cast<std::size_t>(r.tokens[t]));
      if (r.tokens[t] == Lexicon::kEos) {
        EXPECT_EQ(r.gates[t], 0);
        continue;
      }
      const double pg = outs[t].gate_prob.item();
      EXPECT_EQ(r.gates[t], pg > 0.5 ? 1 : 0);
      lp += std::log(r.gates[t] ? pg : 1.0 - pg);
    }
    EXPECT_NEAR(r.logprob, lp, 1e-9);
  }
}

TEST(Greedy, StopsAtEosAndRespectsMaxLen) {
  const auto& f = fixture();
  for (const auto& s : f.samples) {
    const auto r = greedy_decode(f.params, s.image_desc, s.control, 7);
    EXPECT_LE(r.tokens.size(), 7u);
    const auto eos = std::find(r.tokens.begin(), r.tokens.end(), Lexicon::kEos);
    if (eos != r.tokens.end()) EXPECT_EQ(eos + 1, r.tokens.end());
    EXPECT_EQ(greedy_decode(f.params, s.image_desc, s.control, 1).tokens.size(), 1u);
  }
}

TEST(Beam, WidthOneEqualsGreedy) {
  const auto& f = fixture();
  for (const auto& s : f.samples) {
    const auto g = greedy_decode(f.params, s.image_desc, s.control, 10);
    const auto b = beam_decode(f.params, s.image_desc, s.control, 1, 10);
    ASSERT_EQ(b.size(), 1u);
    EXPECT_EQ(b[0], g);
    EXPECT_DOUBLE_EQ(b[0].logprob, g.logprob);
  }
}

TEST(Beam, SortedBoundedAndNeverWorseThanGreedy) {
  const auto& f = fixture();
  for (const auto& s : f.samples) {
    const auto g = greedy_decode(f.params, s.image_desc, s.control, 10);
    const auto b = beam_decode(f.params, s.image_desc, s.control, 5, 10);
    ASSERT_FALSE(b.empty());
    EXPECT_LE(b.size(), 5u);
    for (std::size_t i = 1; i < b.size(); ++i) EXPECT_GE(b[i - 1].normalized(), b[i].normalized());
    EXPECT_GE(b[0].normalized(), g.normalized() - 1e-12);
    for (const auto& h : b) {
      EXPECT_LE(h.tokens.size(), 10u);
      const auto eos = std::find(h.tokens.begin(), h.tokens.end(), Lexicon::kEos);
      if (eos != h.tokens.end()) EXPECT_EQ(eos + 1, h.tokens.end());
      const double lp = sequence_logprob(f.params, s.image_desc, s.control, h.tokens, h.gates).item();
      EXPECT_NEAR(h.logprob, lp, 1e-9);
    }
  }
}

TEST(Beam, DeterministicAndValidated) {
  const auto& f = fixture();
  const auto& s = f.samples[0];
  const auto a = beam_decode(f.params, s.image_desc, s.control, 3, 10);
  const auto b = beam_decode(f.params, s.image_desc, s.control, 3, 10);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i], b[i]);
    EXPECT_EQ(a[i].logprob, b[i].logprob);
  }
  EXPECT_THROW(beam_decode(f.params, s.image_desc, s.control, 0, 10), UsageError);
  const auto one = beam_decode(f.params, s.image_desc, s.control, 4, 1);
  for (const auto& h : one) EXPECT_EQ(h.tokens.size(), 1u);
}

TEST(Sample, LogprobMatchesDifferentiableScore) {
  const auto& f = fixture();
  Rng rng(9);
  for (const auto& s : f.samples)
    for (int k = 0; k < 3; ++k) {
      const auto r = sample_decode(f.params, s.image_desc, s.control, rng, 15);
      EXPECT_NEAR(r.logprob, sequence_logprob(f.params, s.image_desc, s.control, r.tokens, r.gates).item(), 1e-9);
    }
}

TEST(Sample, ZeroTemperatureIsGreedyAndSeedsReproduce) {
  const auto& f = fixture();
  const auto& s = f.samples[1];
  Rng rng(1);
  EXPECT_EQ(sample_decode(f.params, s.image_desc, s.control, rng, 10, 0.0),
            greedy_decode(f.params, s.image_desc, s.control, 10));
  Rng a(77), b(77);
  for (int k = 0; k < 5; ++k)
    EXPECT_EQ(sample_decode(f.params, s.image_desc, s.control, a, 10),
              sample_decode(f.params, s.image_desc, s.control, b, 10));
}

TEST(Sample, FirstWordFrequenciesFollowTheModel) {
  const auto& f = fixture();
  const auto& s = f.samples[0];
  std::vector<double> probs;
  {
    NoGradGuard ng;
    const auto outs = forced_pass(f.params, s.image_desc, s.control, {Lexicon::kEos}, {0});
    for (double v : outs[0].word_logprobs.data()) probs.push_back(std::exp(v));
  }
  // <bos> is never emitted; the rest keep their relative odds.
  const double rest = 1.0 - probs[Lexicon::kBos];
  probs[Lexicon::kBos] = 0.0;
  for (auto& v : probs) v /= rest;
  Rng rng(3);
  const int n = 20000;
  std::vector<double> counts(probs.size(), 0.0);
  for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(sample_decode(f.params, s.image_desc, s.control, rng, 1).tokens[0])] += 1;
  for (std::size_t w = 0; w < probs.size(); ++w) {
    const double sd = std::sqrt(probs[w] * (1 - probs[w]) / n);
    EXPECT_NEAR(counts[w] / n, probs[w], 5 * sd + 1e-4) << "word " << w;
  }
}

TEST(SequenceLogprob, GradientFlowsAndEosGateIsIgnored) {
  const auto& f = fixture();
  const auto& s = f.samples[0];
  const std::vector<int> tokens{5, 6, Lexicon::kEos};
  const double a = sequence_logprob(f.params, s.image_desc, s.control, tokens, {1, 0, 0}).item();
  const double b = sequence_logprob(f.params, s.image_desc, s.control, tokens, {1, 0, 1}).item();
  EXPECT_DOUBLE_EQ(a, b);
  EXPECT_TRUE(sequence_logprob(f.params, s.image_desc, s.control, tokens, {1, 0, 0}).requires_grad());
}

TEST(Trace, SpansEndAtGatesAndNameTheirSet) {
  const auto& f = fixture();
  const Lexicon& lex = *f.corpus.lexicon;
  const auto& im = f.corpus.images[0];
  const auto control = im.control({{0, 1}, {2}});
  DecodeResult r;
  r.tokens = {lex.id("a"), lex.id("dog"), lex.id("sits"), lex.id("near"), lex.id("a"), lex.id("red"), lex.id("car"),
              Lexicon::kEos};
  r.gates = {0, 1, 0, 0, 0, 0, 1, 0};
  const auto lines = grounding_trace(r, control, lex);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "a dog -> 0 [0,1]");
  EXPECT_EQ(lines[1], "a red car -> 1 [2]");
  const std::regex shape(R"(^[a-z ]+ -> \d+ \[\d+(,\d+)*\]$)");
  for (const auto& s : f.samples) {
    const auto g = greedy_decode(f.params, s.image_desc, s.control, 12);
    for (const auto& line : grounding_trace(g, s.control, lex)) EXPECT_TRUE(std::regex_match(line, shape)) << line;
  }
}

TEST(Trace, PointerPastTheEndReusesLastSet) {
  const auto& f = fixture();
  const Lexicon& lex = *f.corpus.lexicon;
  const auto control = f.corpus.images[0].control({{1}});
  DecodeResult r;
  r.tokens = {lex.id("dog"), lex.id("cat"), Lexicon::kEos};
  r.gates = {1, 1, 0};
  const auto lines = grounding_trace(r, control, lex);
  EXPECT_EQ(lines, (std::vector<std::string>{"dog -> 0 [1]", "cat -> 0 [1]"}));
}
