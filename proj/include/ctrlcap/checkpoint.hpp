#pragma once

// JSON checkpoints: {format, version, model?, sorter?, meta}. Each parameter
// group maps names to {shape, values}. Doubles are written in shortest
// round-trip form, so save/load is exact.

#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"

#include "ctrlcap/error.hpp"
#include "ctrlcap/model.hpp"
#include "ctrlcap/sorter.hpp"

namespace ctrlcap {

inline constexpr const char* kCheckpointFormat = "ctrlcap-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::optional<ModelParams> model;
  std::optional<SortNetParams> sorter;
  nlohmann::json meta = nlohmann::json::object();
};

namespace detail {

inline nlohmann::json params_to_json(const NamedParams& params) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, t] : params) j[name] = {{"shape", t.shape()}, {"values", t.to_vector()}};
  return j;
}

inline void params_from_json(const nlohmann::json& j, const NamedParams& expected, const std::vector<Tensor*>& dst,
                             const std::string& group) {
  if (!j.is_object()) throw CheckpointError("checkpoint group '" + group + "' is not an object");
  if (j.size() != expected.size())
    throw CheckpointError("checkpoint group '" + group + "' has " + std::to_string(j.size()) + " tensors, expected " +
                          std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, ref] = expected[i];
    if (!j.contains(name)) throw CheckpointError("checkpoint group '" + group + "' is missing '" + name + "'");
    const auto& e = j.at(name);
    const auto shape = e.at("shape").get<Shape>();
    if (shape != ref.shape())
      throw CheckpointError("checkpoint tensor '" + group + "." + name + "' has shape " + shape_str(shape) +
                            ", expected " + shape_str(ref.shape()));
    auto values = e.at("values").get<std::vector<double>>();
    if (values.size() != shape_numel(shape))
      throw CheckpointError("checkpoint tensor '" + group + "." + name + "' has the wrong number of values");
    *dst[i] = Tensor::from(shape, std::move(values), true);
  }
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim}, {"feat_dim", c.feat_dim}, {"hidden", c.hidden},
          {"att_dim", c.att_dim},       {"init_range", c.init_range}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.feat_dim = j.at("feat_dim").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.att_dim = j.at("att_dim").get<std::size_t>();
  c.init_range = j.at("init_range").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline nlohmann::json sorter_config_to_json(const SortNetConfig& c) {
  return {{"feat_dim", c.feat_dim}, {"emb_dim", c.emb_dim}, {"visual1", c.visual1},
          {"visual2", c.visual2},   {"textual", c.textual}, {"merge", c.merge},
          {"n_max", c.n_max},       {"sinkhorn_iters", c.sinkhorn_iters}, {"temperature", c.temperature},
          {"seed", c.seed}};
}

inline SortNetConfig sorter_config_from_json(const nlohmann::json& j) {
  SortNetConfig c;
  c.feat_dim = j.at("feat_dim").get<std::size_t>();
  c.emb_dim = j.at("emb_dim").get<std::size_t>();
  c.visual1 = j.at("visual1").get<std::size_t>();
  c.visual2 = j.at("visual2").get<std::size_t>();
  c.textual = j.at("textual").get<std::size_t>();
  c.merge = j.at("merge").get<std::size_t>();
  c.n_max = j.at("n_max").get<std::size_t>();
  c.sinkhorn_iters = j.at("sinkhorn_iters").get<std::size_t>();
  c.temperature = j.at("temperature").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
  nlohmann::json j = {{"format", kCheckpointFormat}, {"version", kCheckpointVersion}, {"meta", ck.meta}};
  j["model"] = ck.model ? nlohmann::json{{"config", detail::model_config_to_json(ck.model->config)},
                                         {"params", detail::params_to_json(ck.model->named())}}
                        : nlohmann::json(nullptr);
  j["sorter"] = ck.sorter ? nlohmann::json{{"config", detail::sorter_config_to_json(ck.sorter->config)},
                                           {"params", detail::params_to_json(ck.sorter->named())}}
                          : nlohmann::json(nullptr);
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || j.value("format", std::string()) != kCheckpointFormat)
      throw CheckpointError("not a checkpoint file (missing format tag)");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                            std::to_string(kCheckpointVersion) + ")");
    Checkpoint ck;
    ck.meta = j.value("meta", nlohmann::json::object());
    if (j.contains("model") && !j.at("model").is_null()) {
      const auto cfg = detail::model_config_from_json(j.at("model").at("config"));
      ModelParams p = ModelParams::init(cfg);
      detail::params_from_json(j.at("model").at("params"), p.named(), p.named_mut(), "model");
      ck.model = std::move(p);
    }
    if (j.contains("sorter") && !j.at("sorter").is_null()) {
      const auto cfg = detail::sorter_config_from_json(j.at("sorter").at("config"));
      SortNetParams p = SortNetParams::init(cfg);
      detail::params_from_json(j.at("sorter").at("params"), p.named(), p.named_mut(), "sorter");
      ck.sorter = std::move(p);
    }
    return ck;
  } catch (const CheckpointError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const Error& e) {
    throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out << checkpoint_to_json(ck).dump() << "\n";
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace ctrlcap
