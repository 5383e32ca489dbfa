#pragma once

// Synthetic grounded-caption corpus. Each image is a handful of entities
// (one or more same-class regions); each caption mentions a subset of the
// entities in some order with a fixed "det [adj] noun" chunk template, so the
// chunk <-> region-set mapping is exact by construction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "ctrlcap/data.hpp"
#include "ctrlcap/error.hpp"
#include "ctrlcap/lexicon.hpp"
#include "ctrlcap/rng.hpp"

namespace ctrlcap {

struct ClassSpec {
  std::string name;
  std::string singular;
  std::string plural;
};

enum class MentionOrder { random, left_to_right };

struct GrammarConfig {
  std::vector<ClassSpec> classes;
  std::vector<std::string> adjectives;
  std::vector<std::string> verbs;
  std::vector<std::string> connectives;

  std::size_t feat_dim = 64;
  std::size_t emb_dim = 16;
  std::size_t n_max = 4;
  int min_regions = 3;
  int max_regions = 8;
  int min_captions = 2;
  int max_captions = 4;
  int max_chunks = 4;
  int refs_per_control = 1;
  double multi_region_prob = 0.2;
  double attribute_prob = 0.5;
  double feat_noise = 0.1;
  double noun_spread = 0.1;
  MentionOrder order = MentionOrder::random;

  static GrammarConfig standard() {
    GrammarConfig g;
    g.classes = {{"dog", "dog", "dogs"},       {"cat", "cat", "cats"},       {"man", "man", "men"},
                 {"woman", "woman", "women"},  {"car", "car", "cars"},       {"tree", "tree", "trees"},
                 {"ball", "ball", "balls"},    {"bench", "bench", "benches"}, {"bird", "bird", "birds"},
                 {"horse", "horse", "horses"}, {"kite", "kite", "kites"},    {"table", "table", "tables"}};
    g.adjectives = {"red", "small", "large", "white", "black"};
    g.verbs = {"sits", "stands", "is", "waits"};
    g.connectives = {"near", "with", "beside", "behind", "and"};
    return g;
  }

  void validate() const {
    if (classes.empty()) throw ConfigError("grammar has no classes");
    if (verbs.empty() || connectives.empty()) throw ConfigError("grammar needs verbs and connectives");
    if (classes.size() > emb_dim)
      throw ConfigError("grammar has more classes (" + std::to_string(classes.size()) +
                        ") than embedding dimensions (" + std::to_string(emb_dim) + ")");
    if (feat_dim == 0 || emb_dim == 0) throw ConfigError("feature dimensions must be positive");
    if (n_max < 1 || n_max > 4) throw ConfigError("n_max must be in [1,4]");
    if (min_regions < 2 || max_regions < min_regions || max_regions > 10)
      throw ConfigError("region counts must satisfy 2 <= min <= max <= 10");
    if (min_captions < 2 || max_captions < min_captions) throw ConfigError("need at least 2 captions per image");
    if (max_chunks < 2 || static_cast<std::size_t>(max_chunks) > kMaxControlLength)
      throw ConfigError("max_chunks must be in [2,10]");
    if (refs_per_control < 1) throw ConfigError("refs_per_control must be positive");
  }
};

namespace detail {

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double sd) {
  std::vector<double> v(n);
  for (auto& x : v) x = sd * rng.normal();
  return v;
}

// Orthonormal class embeddings: cross-class cosine 0; each noun is its class
// direction plus an orthogonal perturbation of norm `spread`.
inline Lexicon build_lexicon(const GrammarConfig& g, Rng& rng) {
  Lexicon lex;
  lex.feat_dim = g.feat_dim;
  lex.emb_dim = g.emb_dim;
  lex.n_max = g.n_max;
  for (const char* d : {"a", "two", "three", "four"}) lex.add_word(d, WordKind::determiner);
  for (const auto& a : g.adjectives) lex.add_word(a, WordKind::adjective);
  for (const auto& v : g.verbs) lex.add_word(v, WordKind::verb);
  for (const auto& c : g.connectives) lex.add_word(c, WordKind::connective);

  std::vector<std::vector<double>> basis;
  for (const auto& spec : g.classes) {
    auto v = random_vector(rng, g.emb_dim, 1.0);
    for (const auto& b : basis) {
      const double p = dot(v, b);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * b[i];
    }
    normalize_in_place(v);
    basis.push_back(v);
    ObjectClass oc;
    oc.name = spec.name;
    oc.singular = lex.add_word(spec.singular, WordKind::noun);
    oc.plural = lex.add_word(spec.plural, WordKind::noun);
    oc.embedding = v;
    for (int word : {oc.singular, oc.plural}) {
      auto u = random_vector(rng, g.emb_dim, 1.0);
      const double p = dot(u, v);
      for (std::size_t i = 0; i < u.size(); ++i) u[i] -= p * v[i];
      normalize_in_place(u);
      std::vector<double> e(g.emb_dim);
      for (std::size_t i = 0; i < e.size(); ++i) e[i] = v[i] + g.noun_spread * u[i];
      normalize_in_place(e);
      lex.nouns.insert(word, std::move(e));
    }
    lex.classes.push_back(std::move(oc));
  }
  return lex;
}

struct Entity {
  int class_id = 0;
  int attribute = -1;  // adjective index or -1
  std::vector<int> regions;
  double x = 0.0;
};

}  // namespace detail

/// Deterministic corpus: the same seed and config give byte-identical files.
inline Corpus generate_corpus(std::uint64_t seed, std::size_t n_images, const GrammarConfig& g) {
  g.validate();
  Rng rng(seed);
  auto lex = std::make_shared<Lexicon>(detail::build_lexicon(g, rng));

  const std::size_t n_classes = g.classes.size();
  std::vector<std::vector<double>> class_centroid, attr_centroid;
  for (std::size_t c = 0; c < n_classes; ++c) class_centroid.push_back(detail::random_vector(rng, g.feat_dim, 1.0));
  for (std::size_t a = 0; a < g.adjectives.size(); ++a)
    attr_centroid.push_back(detail::random_vector(rng, g.feat_dim, 0.5));

  static const char* kCount[] = {"a", "a", "two", "three", "four"};

  Corpus corpus;
  corpus.lexicon = lex;
  for (std::size_t img = 0; img < n_images; ++img) {
    Image im;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "img_%05zu", img);
    im.id = idbuf;

    // Partition the regions into at least two entities.
    const int n_regions = rng.between(g.min_regions, g.max_regions);
    std::vector<int> sizes;
    int left = n_regions;
    while (left > 0) {
      int s = 1;
      if (left > 1 && g.n_max > 1 && rng.bernoulli(g.multi_region_prob))
        s = rng.between(2, std::min<int>(static_cast<int>(g.n_max), left));
      if (sizes.empty() && s == left) s = left - 1;
      sizes.push_back(s);
      left -= s;
    }

    // Distinct classes while the grammar has enough of them.
    std::vector<std::size_t> class_pool = rng.permutation(n_classes);
    std::vector<std::size_t> slots = rng.permutation(10);
    std::vector<detail::Entity> entities;
    for (std::size_t e = 0; e < sizes.size(); ++e) {
      detail::Entity ent;
      ent.class_id = static_cast<int>(e < n_classes ? class_pool[e] : rng.below(n_classes));
      if (!g.adjectives.empty() && rng.bernoulli(g.attribute_prob))
        ent.attribute = static_cast<int>(rng.below(g.adjectives.size()));
      ent.x = 0.1 * static_cast<double>(slots[e]) + rng.uniform(0.02, 0.06);
      for (int k = 0; k < sizes[e]; ++k) {
        Region r;
        r.class_id = ent.class_id;
        r.class_emb = lex->classes[static_cast<std::size_t>(ent.class_id)].embedding;
        r.feat = class_centroid[static_cast<std::size_t>(ent.class_id)];
        for (std::size_t i = 0; i < g.feat_dim; ++i) {
          if (ent.attribute >= 0) r.feat[i] += attr_centroid[static_cast<std::size_t>(ent.attribute)][i];
          r.feat[i] += g.feat_noise * rng.normal();
        }
        r.geom = {std::clamp(ent.x + rng.uniform(-0.01, 0.01), 0.0, 1.0), rng.uniform(0.0, 0.7),
                  rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)};
        ent.regions.push_back(static_cast<int>(im.regions.size()));
        im.regions.push_back(std::move(r));
      }
      entities.push_back(std::move(ent));
    }

    const std::size_t n_ent = entities.size();
    const std::size_t max_k = std::min<std::size_t>(n_ent, static_cast<std::size_t>(g.max_chunks));
    const auto by_x = [&](std::vector<std::size_t>& order) {
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return entities[a].x < entities[b].x; });
    };

    // Choose distinct control orders. The first two captions of a
    // random-order image mention the same entities in two different orders.
    std::vector<std::vector<std::size_t>> orders;
    std::set<std::vector<std::size_t>> seen;
    const int n_caps = rng.between(g.min_captions, g.max_captions);
    for (int attempt = 0; static_cast<int>(orders.size()) < n_caps && attempt < 200; ++attempt) {
      std::vector<std::size_t> order;
      if (g.order == MentionOrder::random && orders.size() == 1 && orders[0].size() >= 2) {
        order = orders[0];
        while (order == orders[0]) rng.shuffle(order);
      } else {
        const std::size_t k = orders.empty() ? static_cast<std::size_t>(rng.between(2, static_cast<int>(max_k)))
                                             : static_cast<std::size_t>(rng.between(1, static_cast<int>(max_k)));
        auto perm = rng.permutation(n_ent);
        order.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
        if (g.order == MentionOrder::left_to_right) by_x(order);
      }
      if (seen.insert(order).second) orders.push_back(std::move(order));
    }

    for (const auto& order : orders) {
      for (int ref = 0; ref < g.refs_per_control; ++ref) {
        GroundedCaption cap;
        for (std::size_t c = 0; c < order.size(); ++c) {
          const auto& ent = entities[order[c]];
          if (c == 1) cap.tokens.push_back(lex->id(g.verbs[rng.below(g.verbs.size())]));
          if (c >= 1) cap.tokens.push_back(lex->id(g.connectives[rng.below(g.connectives.size())]));
          Chunk ch;
          ch.start = cap.tokens.size();
          const std::size_t n = ent.regions.size();
          cap.tokens.push_back(lex->id(kCount[std::min<std::size_t>(n, 4)]));
          if (ent.attribute >= 0) cap.tokens.push_back(lex->id(g.adjectives[static_cast<std::size_t>(ent.attribute)]));
          const auto& cls = lex->classes[static_cast<std::size_t>(ent.class_id)];
          cap.tokens.push_back(n == 1 ? cls.singular : cls.plural);
          ch.end = cap.tokens.size() - 1;
          ch.regions = ent.regions;
          cap.chunks.push_back(std::move(ch));
        }
        if (order.size() == 1) cap.tokens.push_back(lex->id(g.verbs[rng.below(g.verbs.size())]));
        cap.tokens.push_back(Lexicon::kEos);
        finalize_caption(im, static_cast<long>(im.captions.size()), cap, *lex);
        im.captions.push_back(std::move(cap));
      }
    }
    corpus.images.push_back(std::move(im));
  }
  return corpus;
}

/// Contiguous 80/10/10 split by image order.
struct CorpusSplits {
  Corpus train, val, test;
};

inline CorpusSplits split_corpus(const Corpus& all) {
  const std::size_t n = all.images.size();
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_val = n / 10;
  CorpusSplits s;
  s.train.lexicon = s.val.lexicon = s.test.lexicon = all.lexicon;
  for (std::size_t i = 0; i < n; ++i) {
    Corpus& dst = i < n_train ? s.train : (i < n_train + n_val ? s.val : s.test);
    dst.images.push_back(all.images[i]);
  }
  return s;
}

}  // namespace ctrlcap
