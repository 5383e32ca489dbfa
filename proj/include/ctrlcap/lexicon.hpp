#pragma once

// Vocabulary, object classes and the synthetic noun embedding table that the
// alignment and IoU metrics read cosine similarities from.

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "ctrlcap/error.hpp"

namespace ctrlcap {

enum class WordKind { special, determiner, adjective, noun, verb, connective };

inline const char* to_string(WordKind k) {
  switch (k) {
    case WordKind::special: return "special";
    case WordKind::determiner: return "determiner";
    case WordKind::adjective: return "adjective";
    case WordKind::noun: return "noun";
    case WordKind::verb: return "verb";
    case WordKind::connective: return "connective";
  }
  return "special";
}

inline WordKind word_kind_from_string(const std::string& s) {
  for (auto k : {WordKind::special, WordKind::determiner, WordKind::adjective, WordKind::noun,
                 WordKind::verb, WordKind::connective})
    if (s == to_string(k)) return k;
  throw CorpusError("unknown word kind '" + s + "'");
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void normalize_in_place(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  if (n > 0)
    for (double& x : v) x /= n;
}

/// Word id -> unit-norm embedding. Stands in for pretrained word vectors.
class NounEmbeddingTable {
 public:
  // Vectors must already be unit norm; stored bit-exact so files round-trip.
  void insert(int word, std::vector<double> v) {
    if (std::abs(dot(v, v) - 1.0) > 1e-9)
      throw MetricError("noun embedding for id " + std::to_string(word) + " is not unit norm");
    table_[word] = std::move(v);
  }
  bool contains(int word) const { return table_.count(word) > 0; }
  const std::vector<double>& at(int word) const {
    auto it = table_.find(word);
    if (it == table_.end()) throw MetricError("no embedding for noun id " + std::to_string(word));
    return it->second;
  }
  double cosine(int a, int b) const { return dot(at(a), at(b)); }
  std::size_t size() const { return table_.size(); }
  const std::map<int, std::vector<double>>& entries() const { return table_; }

 private:
  std::map<int, std::vector<double>> table_;
};

struct ObjectClass {
  std::string name;
  int singular = -1;
  int plural = -1;
  std::vector<double> embedding;  // unit norm, emb_dim
};

class Lexicon {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;

  Lexicon() {
    add_word("<bos>", WordKind::special);
    add_word("<eos>", WordKind::special);
  }

  int add_word(const std::string& w, WordKind kind) {
    if (auto it = index_.find(w); it != index_.end()) {
      if (kinds_[static_cast<std::size_t>(it->second)] != kind)
        throw ConfigError("word '" + w + "' declared with two kinds");
      return it->second;
    }
    const int id = static_cast<int>(words_.size());
    words_.push_back(w);
    kinds_.push_back(kind);
    index_[w] = id;
    return id;
  }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw LookupError("unknown word '" + w + "'");
    return it->second;
  }
  bool has(const std::string& w) const { return index_.count(w) > 0; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  WordKind kind(int id) const { return kinds_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return words_.size(); }

  bool is_noun(int id) const { return nouns.contains(id); }

  /// Class whose singular or plural noun is this word, or -1.
  int noun_class(int word) const {
    for (std::size_t c = 0; c < classes.size(); ++c)
      if (classes[c].singular == word || classes[c].plural == word) return static_cast<int>(c);
    return -1;
  }

  /// Words that can appear inside a noun chunk.
  bool is_chunk_word(int id) const {
    const auto k = kind(id);
    return k == WordKind::determiner || k == WordKind::adjective || k == WordKind::noun;
  }

  std::string join(const std::vector<int>& tokens, bool keep_eos = false) const {
    std::string s;
    for (int t : tokens) {
      if (t == kEos && !keep_eos) break;
      if (!s.empty()) s += ' ';
      s += word(t);
    }
    return s;
  }

  std::size_t feat_dim = 64;
  std::size_t emb_dim = 16;
  std::size_t n_max = 4;
  std::vector<ObjectClass> classes;
  NounEmbeddingTable nouns;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["feat_dim"] = feat_dim;
    j["emb_dim"] = emb_dim;
    j["n_max"] = n_max;
    auto& ws = j["words"] = nlohmann::json::array();
    for (std::size_t i = 0; i < words_.size(); ++i)
      ws.push_back({{"word", words_[i]}, {"kind", to_string(kinds_[i])}});
    auto& cs = j["classes"] = nlohmann::json::array();
    for (const auto& c : classes)
      cs.push_back({{"name", c.name},
                    {"singular", word(c.singular)},
                    {"plural", word(c.plural)},
                    {"embedding", c.embedding}});
    auto& ne = j["noun_embeddings"] = nlohmann::json::object();
    for (const auto& [w, v] : nouns.entries()) ne[word(w)] = v;
    return j;
  }

  static Lexicon from_json(const nlohmann::json& j) {
    try {
      if (j.at("version").get<int>() != 1) throw CorpusError("unsupported lexicon version");
      Lexicon lex;
      lex.feat_dim = j.at("feat_dim").get<std::size_t>();
      lex.emb_dim = j.at("emb_dim").get<std::size_t>();
      lex.n_max = j.at("n_max").get<std::size_t>();
      const auto& ws = j.at("words");
      for (std::size_t i = 0; i < ws.size(); ++i) {
        const auto w = ws[i].at("word").get<std::string>();
        const auto k = word_kind_from_string(ws[i].at("kind").get<std::string>());
        if (i < 2) {
          if (lex.word(static_cast<int>(i)) != w) throw CorpusError("lexicon must start with <bos>, <eos>");
          continue;
        }
        lex.add_word(w, k);
      }
      for (const auto& c : j.at("classes")) {
        ObjectClass oc;
        oc.name = c.at("name").get<std::string>();
        oc.singular = lex.id(c.at("singular").get<std::string>());
        oc.plural = lex.id(c.at("plural").get<std::string>());
        oc.embedding = c.at("embedding").get<std::vector<double>>();
        if (oc.embedding.size() != lex.emb_dim)
          throw CorpusError("class '" + oc.name + "' embedding has wrong dimension");
        lex.classes.push_back(std::move(oc));
      }
      for (const auto& [w, v] : j.at("noun_embeddings").items()) {
        auto vec = v.get<std::vector<double>>();
        if (vec.size() != lex.emb_dim) throw CorpusError("noun '" + w + "' embedding has wrong dimension");
        lex.nouns.insert(lex.id(w), std::move(vec));
      }
      return lex;
    } catch (const nlohmann::json::exception& e) {
      throw CorpusError(std::string("malformed lexicon: ") + e.what());
    } catch (const LookupError& e) {
      throw CorpusError(std::string("malformed lexicon: ") + e.what());
    } catch (const MetricError& e) {
      throw CorpusError(std::string("malformed lexicon: ") + e.what());
    }
  }

 private:
  std::vector<std::string> words_;
  std::vector<WordKind> kinds_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace ctrlcap
