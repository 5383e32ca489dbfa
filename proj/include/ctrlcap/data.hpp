#pragma once

// Grounded captions, region sets, control signals and the JSONL corpus
// format. A corpus file holds one image per line:
//
//   {"image_id": "...",
//    "regions": [{"feat": [...], "class_id": 3, "geom": [x, y, w, h]}, ...],
//    "captions": [{"tokens": ["a", "dog", ...],
//                  "chunks": [{"start": 0, "end": 1, "set": [0, 2]}, ...],
//                  "gates": [0, 1, ...]}]}
//
// Chunk bounds are inclusive token positions. "gates" is optional on load and
// is checked against the chunk spans when present. The end-of-sentence token
// is implicit in the file and appended on load.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ctrlcap/error.hpp"
#include "ctrlcap/lexicon.hpp"

namespace ctrlcap {

inline constexpr std::size_t kMaxControlLength = 10;

struct Region {
  std::vector<double> feat;
  int class_id = 0;
  std::vector<double> class_emb;
  std::array<double, 4> geom{};  // normalized x, y, w, h
};

struct RegionSet {
  std::vector<int> indices;  // positions in the image's region list
  std::vector<Region> regions;

  std::size_t size() const { return regions.size(); }
  double mean_x() const {
    double s = 0.0;
    for (const auto& r : regions) s += r.geom[0];
    return regions.empty() ? 0.0 : s / static_cast<double>(regions.size());
  }
};

struct ControlSignal {
  std::vector<RegionSet> sets;

  std::size_t size() const { return sets.size(); }
  /// The set a pointer value addresses; pointer N keeps the last set active.
  const RegionSet& at_pointer(std::size_t pointer) const {
    return sets.at(std::min(pointer, sets.size() - 1));
  }
  std::vector<std::vector<int>> index_lists() const {
    std::vector<std::vector<int>> out;
    for (const auto& s : sets) out.push_back(s.indices);
    return out;
  }
};

struct Chunk {
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // inclusive
  std::size_t set_index = 0;
  std::vector<int> regions;
};

struct GateSequence {
  std::vector<int> gates;
  std::vector<std::size_t> region_seq;
};

struct GroundedCaption {
  std::vector<int> tokens;  // ends with Lexicon::kEos
  std::vector<Chunk> chunks;
  std::vector<bool> is_noun;
  std::vector<int> gates;
  std::vector<std::size_t> region_seq;
};

/// g*_t = 1 on the last token of every chunk. The region-set index holds the
/// current chunk's set and moves to the next chunk's set right after a gate;
/// tokens outside chunks keep the most recent index.
inline GateSequence build_gate_sequence(const std::vector<int>& tokens, const std::vector<Chunk>& chunks) {
  if (chunks.empty()) throw CorpusError("caption has no chunks");
  std::size_t limit = tokens.size();
  if (!tokens.empty() && tokens.back() == Lexicon::kEos) --limit;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    const auto& ch = chunks[c];
    if (ch.start > ch.end) throw CorpusError("chunk " + std::to_string(c) + " has start > end");
    if (ch.end >= limit) throw CorpusError("chunk " + std::to_string(c) + " exceeds the token range");
    if (c > 0 && ch.start <= chunks[c - 1].end)
      throw CorpusError("chunk " + std::to_string(c) + " overlaps or precedes chunk " + std::to_string(c - 1));
    if (c > 0 && ch.set_index <= chunks[c - 1].set_index)
      throw CorpusError("chunk " + std::to_string(c) + " region-set index is not increasing");
  }
  GateSequence out;
  out.gates.assign(tokens.size(), 0);
  out.region_seq.assign(tokens.size(), chunks.front().set_index);
  std::size_t next = 0;
  std::size_t current = chunks.front().set_index;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    out.region_seq[t] = current;
    if (next < chunks.size() && t == chunks[next].end) {
      out.gates[t] = 1;
      ++next;
      if (next < chunks.size()) current = chunks[next].set_index;
    }
  }
  return out;
}

struct Image {
  std::string id;
  std::vector<Region> regions;
  std::vector<GroundedCaption> captions;

  std::vector<double> descriptor() const {
    std::vector<double> d(regions.empty() ? 0 : regions[0].feat.size(), 0.0);
    for (const auto& r : regions)
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += r.feat[i];
    for (auto& v : d) v /= static_cast<double>(regions.size());
    return d;
  }

  RegionSet region_set(const std::vector<int>& indices) const {
    if (indices.empty()) throw UsageError("empty region set");
    RegionSet s;
    for (int i : indices) {
      if (i < 0 || static_cast<std::size_t>(i) >= regions.size())
        throw LookupError("image '" + id + "' has no region " + std::to_string(i));
      s.indices.push_back(i);
      s.regions.push_back(regions[static_cast<std::size_t>(i)]);
    }
    return s;
  }

  ControlSignal control(const std::vector<std::vector<int>>& sets) const {
    ControlSignal c;
    for (const auto& s : sets) c.sets.push_back(region_set(s));
    return c;
  }

  ControlSignal control_of(const GroundedCaption& cap) const {
    ControlSignal c;
    for (const auto& ch : cap.chunks) c.sets.push_back(region_set(ch.regions));
    return c;
  }
};

struct Sample {
  std::string image_id;
  std::size_t image_index = 0;
  std::size_t caption_index = 0;
  std::vector<double> image_desc;
  ControlSignal control;
  GroundedCaption caption;
};

struct Corpus {
  std::shared_ptr<const Lexicon> lexicon;
  std::vector<Image> images;

  std::vector<Sample> samples() const {
    std::vector<Sample> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto desc = images[i].descriptor();
      for (std::size_t c = 0; c < images[i].captions.size(); ++c) {
        Sample s;
        s.image_id = images[i].id;
        s.image_index = i;
        s.caption_index = c;
        s.image_desc = desc;
        s.control = images[i].control_of(images[i].captions[c]);
        s.caption = images[i].captions[c];
        out.push_back(std::move(s));
      }
    }
    return out;
  }

  const Image& image(const std::string& id) const {
    for (const auto& im : images)
      if (im.id == id) return im;
    throw LookupError("unknown image id '" + id + "'");
  }
};

// ---------------------------------------------------------------------------
// Validation and (de)serialization

namespace detail {

inline std::string where(const std::string& image, long caption, const std::string& field) {
  std::string s = "image '" + image + "'";
  if (caption >= 0) s += " caption " + std::to_string(caption);
  return s + " field '" + field + "'";
}

}  // namespace detail

/// Fills is_noun, gates and region_seq from tokens and chunks, checking every
/// invariant. Throws CorpusError naming the sample and field.
inline void finalize_caption(const Image& image, long caption_index, GroundedCaption& cap,
                             const Lexicon& lex, const std::vector<int>* stored_gates = nullptr) {
  const auto where = [&](const char* f) { return detail::where(image.id, caption_index, f); };
  if (cap.tokens.empty() || cap.tokens.back() != Lexicon::kEos)
    throw CorpusError(where("tokens") + ": must end with <eos>");
  for (std::size_t t = 0; t + 1 < cap.tokens.size(); ++t) {
    const int w = cap.tokens[t];
    if (w < 0 || static_cast<std::size_t>(w) >= lex.size() || lex.kind(w) == WordKind::special)
      throw CorpusError(where("tokens") + ": invalid token at position " + std::to_string(t));
  }
  if (cap.chunks.size() > kMaxControlLength)
    throw CorpusError(where("chunks") + ": more than " + std::to_string(kMaxControlLength) + " chunks");
  for (std::size_t c = 0; c < cap.chunks.size(); ++c) {
    auto& ch = cap.chunks[c];
    ch.set_index = c;
    if (ch.regions.empty()) throw CorpusError(where("chunks") + ": chunk " + std::to_string(c) + " has an empty set");
    if (ch.regions.size() > lex.n_max)
      throw CorpusError(where("chunks") + ": chunk " + std::to_string(c) + " set larger than n_max");
    for (int r : ch.regions)
      if (r < 0 || static_cast<std::size_t>(r) >= image.regions.size())
        throw CorpusError(where("chunks") + ": chunk " + std::to_string(c) + " references missing region " +
                          std::to_string(r));
  }
  GateSequence gs;
  try {
    gs = build_gate_sequence(cap.tokens, cap.chunks);
  } catch (const CorpusError& e) {
    throw CorpusError(where("chunks") + ": " + e.what());
  }
  if (stored_gates && *stored_gates != gs.gates)
    throw CorpusError(where("gates") + ": stored gates disagree with chunk ends");
  cap.gates = std::move(gs.gates);
  cap.region_seq = std::move(gs.region_seq);
  cap.is_noun.assign(cap.tokens.size(), false);
  for (const auto& ch : cap.chunks) {
    if (!lex.is_noun(cap.tokens[ch.end]))
      throw CorpusError(where("chunks") + ": chunk ending at " + std::to_string(ch.end) + " does not end in a noun");
    cap.is_noun[ch.end] = true;
  }
}

inline nlohmann::json image_to_json(const Image& im, const Lexicon& lex) {
  nlohmann::json j;
  j["image_id"] = im.id;
  auto& rs = j["regions"] = nlohmann::json::array();
  for (const auto& r : im.regions)
    rs.push_back({{"feat", r.feat}, {"class_id", r.class_id}, {"geom", r.geom}});
  auto& cs = j["captions"] = nlohmann::json::array();
  for (const auto& c : im.captions) {
    nlohmann::json cj;
    std::vector<std::string> words;
    for (int t : c.tokens)
      if (t != Lexicon::kEos) words.push_back(lex.word(t));
    cj["tokens"] = words;
    auto& chs = cj["chunks"] = nlohmann::json::array();
    for (const auto& ch : c.chunks) chs.push_back({{"start", ch.start}, {"end", ch.end}, {"set", ch.regions}});
    cj["gates"] = std::vector<int>(c.gates.begin(), c.gates.end() - 1);
    cs.push_back(std::move(cj));
  }
  return j;
}

inline Image image_from_json(const nlohmann::json& j, const Lexicon& lex, std::size_t line) {
  Image im;
  im.id = j.contains("image_id") && j["image_id"].is_string() ? j["image_id"].get<std::string>()
                                                               : "<line " + std::to_string(line) + ">";
  const auto fail = [&](long cap, const std::string& field, const std::string& msg) {
    throw CorpusError(detail::where(im.id, cap, field) + ": " + msg);
  };
  if (!j.contains("image_id") || !j["image_id"].is_string()) fail(-1, "image_id", "missing or not a string");
  if (!j.contains("regions") || !j["regions"].is_array() || j["regions"].empty())
    fail(-1, "regions", "missing or empty");
  try {
    for (std::size_t r = 0; r < j["regions"].size(); ++r) {
      const auto& rj = j["regions"][r];
      const std::string tag = "regions[" + std::to_string(r) + "]";
      Region reg;
      if (!rj.contains("feat") || !rj["feat"].is_array()) fail(-1, tag + ".feat", "missing");
      reg.feat = rj["feat"].get<std::vector<double>>();
      if (reg.feat.size() != lex.feat_dim)
        fail(-1, tag + ".feat", "expected dimension " + std::to_string(lex.feat_dim) + ", got " +
                                    std::to_string(reg.feat.size()));
      if (!rj.contains("class_id")) fail(-1, tag + ".class_id", "missing");
      reg.class_id = rj["class_id"].get<int>();
      if (reg.class_id < 0 || static_cast<std::size_t>(reg.class_id) >= lex.classes.size())
        fail(-1, tag + ".class_id", "not a valid class");
      reg.class_emb = lex.classes[static_cast<std::size_t>(reg.class_id)].embedding;
      if (!rj.contains("geom")) fail(-1, tag + ".geom", "missing");
      const auto g = rj["geom"].get<std::vector<double>>();
      if (g.size() != 4) fail(-1, tag + ".geom", "expected 4 values");
      for (std::size_t k = 0; k < 4; ++k) {
        if (!(g[k] >= 0.0 && g[k] <= 1.0)) fail(-1, tag + ".geom", "component outside [0,1]");
        reg.geom[k] = g[k];
      }
      im.regions.push_back(std::move(reg));
    }
    if (!j.contains("captions") || !j["captions"].is_array()) fail(-1, "captions", "missing");
    for (std::size_t c = 0; c < j["captions"].size(); ++c) {
      const auto& cj = j["captions"][c];
      const long ci = static_cast<long>(c);
      GroundedCaption cap;
      if (!cj.contains("tokens")) fail(ci, "tokens", "missing");
      for (const auto& w : cj["tokens"]) {
        const auto s = w.get<std::string>();
        if (!lex.has(s)) fail(ci, "tokens", "unknown word '" + s + "'");
        cap.tokens.push_back(lex.id(s));
      }
      cap.tokens.push_back(Lexicon::kEos);
      if (!cj.contains("chunks")) fail(ci, "chunks", "missing");
      for (const auto& chj : cj["chunks"]) {
        Chunk ch;
        ch.start = chj.at("start").get<std::size_t>();
        ch.end = chj.at("end").get<std::size_t>();
        ch.regions = chj.at("set").get<std::vector<int>>();
        cap.chunks.push_back(std::move(ch));
      }
      std::vector<int> stored;
      const bool has_gates = cj.contains("gates");
      if (has_gates) {
        stored = cj["gates"].get<std::vector<int>>();
        stored.push_back(0);
      }
      finalize_caption(im, ci, cap, lex, has_gates ? &stored : nullptr);
      im.captions.push_back(std::move(cap));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(detail::where(im.id, -1, "record") + ": " + e.what());
  }
  return im;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file '" + path + "'");
  for (const auto& im : corpus.images) out << image_to_json(im, *corpus.lexicon).dump() << '\n';
  if (!out) throw IoError("error writing corpus file '" + path + "'");
}

inline Corpus load_corpus(const std::string& path, std::shared_ptr<const Lexicon> lexicon) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus file '" + path + "'");
  Corpus corpus;
  corpus.lexicon = std::move(lexicon);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw CorpusError(path + ":" + std::to_string(n) + ": " + e.what());
    }
    corpus.images.push_back(image_from_json(j, *corpus.lexicon, n));
  }
  return corpus;
}

inline void save_lexicon(const Lexicon& lex, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write lexicon '" + path + "'");
  out << lex.to_json().dump(1) << '\n';
}

inline std::shared_ptr<const Lexicon> load_lexicon(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read lexicon '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(path + ": " + e.what());
  }
  return std::make_shared<const Lexicon>(Lexicon::from_json(j));
}

// ---------------------------------------------------------------------------
// Control syntax: "[0,2];[1]" is two sets, regions {0,2} then {1}.

inline std::vector<std::vector<int>> parse_control(const std::string& text) {
  std::vector<std::vector<int>> sets;
  std::size_t i = 0;
  const auto fail = [&](const std::string& msg) {
    throw UsageError("control '" + text + "' at offset " + std::to_string(i) + ": " + msg);
  };
  const auto skip_ws = [&] {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  };
  skip_ws();
  if (i == text.size()) fail("empty control signal");
  while (true) {
    skip_ws();
    if (i >= text.size() || text[i] != '[') fail("expected '['");
    ++i;
    std::vector<int> set;
    while (true) {
      skip_ws();
      std::size_t start = i;
      while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
      if (start == i) fail("expected a region index");
      if (i - start > 6) fail("region index too large");
      set.push_back(std::stoi(text.substr(start, i - start)));
      skip_ws();
      if (i < text.size() && text[i] == ',') {
        ++i;
        continue;
      }
      if (i < text.size() && text[i] == ']') {
        ++i;
        break;
      }
      fail("expected ',' or ']'");
    }
    sets.push_back(std::move(set));
    skip_ws();
    if (i == text.size()) break;
    if (text[i] != ';') fail("expected ';'");
    ++i;
  }
  if (sets.size() > kMaxControlLength) throw UsageError("control '" + text + "' has more than 10 sets");
  return sets;
}

inline std::string format_control(const std::vector<std::vector<int>>& sets) {
  std::string s;
  for (std::size_t k = 0; k < sets.size(); ++k) {
    if (k) s += ';';
    s += '[';
    for (std::size_t i = 0; i < sets[k].size(); ++i) s += (i ? "," : "") + std::to_string(sets[k][i]);
    s += ']';
  }
  return s;
}

}  // namespace ctrlcap
