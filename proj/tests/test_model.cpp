#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ctrlcap/ctrlcap.hpp"
#include "test_util.hpp"

using namespace ctrlcap;

namespace {

using Vec = std::vector<double>;

// Plain-loop evaluation of one step. Shares no code with the tensor engine.
struct Scalar {
  const ModelParams& p;
  std::size_t d, A;

  Vec mv(const Tensor& W, const Vec& x) const {
    const std::size_t r = W.dim(0), c = W.dim(1);
    Vec y(r, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) y[i] += W.at(i * c + j) * x[j];
    return y;
  }
  static double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }
  static Vec add(Vec a, const Vec& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
  }
  static Vec softmax(const Vec& z) {
    double mx = *std::max_element(z.begin(), z.end()), s = 0.0;
    Vec e(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(z[i] - mx);
    for (auto& v : e) v /= s;
    return e;
  }
  double score(const Vec& v) const {
    double s = 0.0;
    for (std::size_t a = 0; a < A; ++a) s += p.w_h.at(a) * std::tanh(v[a]);
    return s;
  }
  void lstm(const Vec& x, const Vec& hp, const Vec& mp, const Tensor& wx, const Tensor& wh, const Tensor& b, Vec& h,
            Vec& m) const {
    Vec pre = add(mv(wx, x), mv(wh, hp));
    for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += b.at(i);
    h.assign(d, 0.0);
    m.assign(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      const double ig = sig(pre[i]), fg = sig(pre[d + i]), gg = std::tanh(pre[2 * d + i]), og = sig(pre[3 * d + i]);
      m[i] = fg * mp[i] + ig * gg;
      h[i] = og * std::tanh(m[i]);
    }
  }

  struct Out {
    Vec logp, gate_dist, attention, h1, m1, h2, m2;
  };

  Out run(int word, const Vec& desc, const std::vector<Vec>& regions, const Vec& h1p, const Vec& m1p, const Vec& h2p,
          const Vec& m2p) const {
    const std::size_t E = p.config.embed_dim;
    Vec x;
    for (std::size_t e = 0; e < E; ++e) x.push_back(p.embed.at(static_cast<std::size_t>(word) * E + e));
    x.insert(x.end(), desc.begin(), desc.end());
    x.insert(x.end(), h2p.begin(), h2p.end());
    Out o;
    lstm(x, h1p, m1p, p.lstm1_wx, p.lstm1_wh, p.lstm1_b, o.h1, o.m1);
    Vec gc = add(mv(p.w_ig, x), mv(p.w_hg, h1p)), gv = add(mv(p.w_is, x), mv(p.w_hs, h1p));
    Vec sc(d), sv(d);
    for (std::size_t i = 0; i < d; ++i) {
      sc[i] = sig(gc[i]) * std::tanh(o.m1[i]);
      sv[i] = sig(gv[i]) * std::tanh(o.m1[i]);
    }
    const Vec q = mv(p.w_g, o.h1);
    Vec zr;
    for (const auto& r : regions) zr.push_back(score(add(mv(p.w_sr, r), q)));
    const double zc = score(add(mv(p.w_sg, sc), q));
    const double zv = score(add(mv(p.w_ss, sv), q));
    Vec g{zc};
    g.insert(g.end(), zr.begin(), zr.end());
    o.gate_dist = softmax(g);
    Vec a = zr;
    a.push_back(zv);
    o.attention = softmax(a);
    Vec ctx(d, 0.0);
    for (std::size_t k = 0; k < regions.size(); ++k) {
      const Vec v = mv(p.w_rv, regions[k]);
      for (std::size_t i = 0; i < d; ++i) ctx[i] += o.attention[k] * v[i];
    }
    const Vec vs = mv(p.w_sv, sv);
    for (std::size_t i = 0; i < d; ++i) ctx[i] += o.attention.back() * vs[i];
    Vec x2 = ctx;
    x2.insert(x2.end(), o.h1.begin(), o.h1.end());
    lstm(x2, h2p, m2p, p.lstm2_wx, p.lstm2_wh, p.lstm2_b, o.h2, o.m2);
    Vec logits = mv(p.out_w, o.h2);
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += p.out_b.at(i);
    const Vec pr = softmax(logits);
    for (double v : pr) o.logp.push_back(std::log(v));
    return o;
  }
};

ModelConfig tiny_config(std::size_t V = 6, std::size_t d = 3) {
  ModelConfig c;
  c.vocab_size = V;
  c.embed_dim = 2;
  c.feat_dim = 3;
  c.hidden = d;
  c.att_dim = 2;
  c.init_range = 0.5;
  c.seed = 17;
  return c;
}

Region region(Vec feat) {
  Region r;
  r.feat = std::move(feat);
  return r;
}

ControlSignal control_of_sizes(Rng& rng, std::vector<std::size_t> sizes, std::size_t F) {
  ControlSignal c;
  int idx = 0;
  for (auto n : sizes) {
    RegionSet s;
    for (std::size_t k = 0; k < n; ++k) {
      Vec f(F);
      for (auto& v : f) v = rng.uniform(-1, 1);
      s.regions.push_back(region(f));
      s.indices.push_back(idx++);
    }
    c.sets.push_back(std::move(s));
  }
  return c;
}

void expect_vec_near(const Vec& a, std::span<const double> b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace

TEST(ModelInit, ShapesAndRange) {
  const auto cfg = tiny_config();
  const auto p = ModelParams::init(cfg);
  EXPECT_EQ(p.lstm1_wx.shape(), (Shape{4 * cfg.hidden, cfg.layer1_input()}));
  EXPECT_EQ(p.out_w.shape(), (Shape{cfg.vocab_size, cfg.hidden}));
  for (const auto& [name, t] : p.named())
    for (double v : t.data()) EXPECT_LE(std::abs(v), cfg.init_range) << name;
  EXPECT_EQ(p.named().size(), 20u);
}

TEST(ModelInit, CloneIsDeepAndSeedDeterministic) {
  const auto p = ModelParams::init(tiny_config());
  auto q = p.clone();
  q.embed.mutable_data()[0] += 1.0;
  EXPECT_NE(p.embed.at(0), q.embed.at(0));
  const auto r = ModelParams::init(tiny_config());
  for (std::size_t i = 0; i < p.named().size(); ++i) EXPECT_EQ(p.named()[i].second.to_vector(), r.named()[i].second.to_vector());
}

TEST(ModelInit, RejectsBadConfig) {
  ModelConfig c = tiny_config();
  c.vocab_size = 2;
  EXPECT_THROW(ModelParams::init(c), ConfigError);
  c = tiny_config();
  c.hidden = 0;
  EXPECT_THROW(ModelParams::init(c), ConfigError);
}

TEST(ModelStep, MatchesScalarRecomputationWithConstantWeights) {
  auto cfg = tiny_config();
  auto p = ModelParams::init(cfg);
  for (auto* t : p.named_mut())
    for (auto& v : t->mutable_data()) v = 0.1;
  Rng rng(1);
  const auto control = control_of_sizes(rng, {2}, cfg.feat_dim);
  const Vec desc{0.2, -0.1, 0.4};
  const auto cond = condition(p, desc, control);
  const auto [out, next] = step(p, StepState::initial(cfg), 3, cond.at_pointer(0), cond.image_desc);
  const Scalar sc{p, cfg.hidden, cfg.att_dim};
  const Vec z(cfg.hidden, 0.0);
  const auto o = sc.run(3, desc, {control.sets[0].regions[0].feat, control.sets[0].regions[1].feat}, z, z, z, z);
  expect_vec_near(o.logp, out.word_logprobs.data(), 1e-10);
  expect_vec_near(o.gate_dist, out.gate_dist.data(), 1e-10);
  expect_vec_near(o.attention, out.attention.data(), 1e-10);
  // Constant weights: all logits equal, so words are uniform.
  for (double v : out.word_logprobs.data()) EXPECT_NEAR(v, -std::log(static_cast<double>(cfg.vocab_size)), 1e-12);
}

TEST(ModelStep, MatchesScalarRecomputationOverSeveralSteps) {
  const auto cfg = tiny_config(7, 4);
  const auto p = ModelParams::init(cfg);
  Rng rng(2);
  const auto control = control_of_sizes(rng, {1, 3}, cfg.feat_dim);
  const Vec desc{0.3, 0.1, -0.2};
  const auto cond = condition(p, desc, control);
  const Scalar sc{p, cfg.hidden, cfg.att_dim};
  Vec h1(cfg.hidden, 0.0), m1 = h1, h2 = h1, m2 = h1;
  StepState st = StepState::initial(cfg);
  const std::vector<int> words{Lexicon::kBos, 4, 5, 2};
  const std::vector<int> gates{1, 0, 0, 1};
  for (std::size_t t = 0; t < words.size(); ++t) {
    auto [out, next] = step(p, st, words[t], cond.at_pointer(st.pointer), cond.image_desc);
    std::vector<Vec> regs;
    for (const auto& r : control.at_pointer(st.pointer).regions) regs.push_back(r.feat);
    const auto o = sc.run(words[t], desc, regs, h1, m1, h2, m2);
    expect_vec_near(o.logp, out.word_logprobs.data(), 1e-10);
    expect_vec_near(o.gate_dist, out.gate_dist.data(), 1e-10);
    expect_vec_near(o.attention, out.attention.data(), 1e-10);
    h1 = o.h1, m1 = o.m1, h2 = o.h2, m2 = o.m2;
    st = advance_pointer(std::move(next), gates[t] != 0, control);
  }
  EXPECT_EQ(st.pointer, 2u);
}

TEST(ModelStep, DistributionsSumToOne) {
  const auto cfg = tiny_config(9, 5);
  const auto p = ModelParams::init(cfg);
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto control = control_of_sizes(rng, {1 + rng.below(4)}, cfg.feat_dim);
    const Vec desc{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto cond = condition(p, desc, control);
    const auto [out, next] = step(p, StepState::initial(cfg), static_cast<int>(rng.below(9)), cond.sets[0], cond.image_desc);
    double sw = 0.0;
    for (double v : out.word_logprobs.data()) sw += std::exp(v);
    const auto a = out.attention.data();
    const auto g = out.gate_dist.data();
    EXPECT_NEAR(sw, 1.0, 1e-9);
    EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 1.0, 1e-9);
    EXPECT_NEAR(std::accumulate(g.begin(), g.end(), 0.0), 1.0, 1e-9);
    EXPECT_EQ(out.gate_prob.item(), g[0]);
    EXPECT_EQ(g.size(), control.sets[0].size() + 1);
  }
}

TEST(ModelStep, PointerFollowsClampedGateCount) {
  Rng rng(4);
  ControlSignal c = control_of_sizes(rng, {1, 1, 1}, 3);
  StepState s = StepState::initial(tiny_config());
  const std::vector<int> gates{0, 1, 1, 0, 1, 1, 1};
  std::size_t fired = 0;
  for (int g : gates) {
    s = advance_pointer(std::move(s), g != 0, c);
    fired += static_cast<std::size_t>(g);
    EXPECT_EQ(s.pointer, std::min<std::size_t>(fired, 3));
  }
  // Pointer N keeps the last set active.
  EXPECT_EQ(&c.at_pointer(3), &c.sets[2]);
}

TEST(ModelStep, RejectsBadInputs) {
  const auto cfg = tiny_config();
  const auto p = ModelParams::init(cfg);
  Rng rng(5);
  const auto control = control_of_sizes(rng, {2}, cfg.feat_dim);
  const Vec desc{0, 0, 0};
  const auto cond = condition(p, desc, control);
  EXPECT_THROW(step(p, StepState::initial(cfg), 99, cond.sets[0], cond.image_desc), UsageError);
  EXPECT_THROW(step(p, StepState::initial(cfg), -1, cond.sets[0], cond.image_desc), UsageError);
  EXPECT_THROW(condition(p, {0, 0}, control), DimensionError);
  EXPECT_THROW(condition(p, desc, ControlSignal{}), UsageError);
  const auto too_long = control_of_sizes(rng, std::vector<std::size_t>(11, 1), cfg.feat_dim);
  EXPECT_THROW(condition(p, desc, too_long), UsageError);
  const auto wrong_dim = control_of_sizes(rng, {1}, 5);
  EXPECT_THROW(condition(p, desc, wrong_dim), DimensionError);
}

TEST(ModelStep, ForcedPassUsesGateDrivenSets) {
  const auto cfg = tiny_config();
  const auto p = ModelParams::init(cfg);
  Rng rng(6);
  const auto control = control_of_sizes(rng, {1, 2, 3}, cfg.feat_dim);
  const auto outs = forced_pass(p, {0.1, 0.2, 0.3}, control, {2, 3, 4, 5, 1}, {1, 0, 1, 1, 0});
  // Set sizes seen at each step: before any gate 1 region, then 2, 2, 3, 3.
  const std::vector<std::size_t> expected{2, 3, 3, 4, 4};
  for (std::size_t t = 0; t < outs.size(); ++t) EXPECT_EQ(outs[t].gate_dist.numel(), expected[t]);
  EXPECT_THROW(forced_pass(p, {0.1, 0.2, 0.3}, control, {2, 3}, {1}), UsageError);
}

TEST(ModelGrad, XeLossMatchesFiniteDifferencesForEveryParameter) {
  const auto cfg = tiny_config(6, 3);
  auto p = ModelParams::init(cfg);
  Rng rng(7);
  const auto control = control_of_sizes(rng, {2, 1}, cfg.feat_dim);
  GroundedCaption cap;
  cap.tokens = {2, 3, 4, 5, Lexicon::kEos};
  cap.gates = {0, 1, 0, 1, 0};
  const Vec desc{0.5, -0.3, 0.2};
  const auto f = [&] { return xe_loss(forced_pass(p, desc, control, cap.tokens, cap.gates), cap); };
  for (auto& [name, t] : p.named()) {
    auto leaf = t;
    const auto a = testutil::analytic_grad(f, leaf);
    NoGradGuard ng;
    const auto n = testutil::numeric_grad([&] { return f().item(); }, leaf);
    EXPECT_LT(testutil::max_rel_error(a, n), 1e-5) << name;
  }
}
