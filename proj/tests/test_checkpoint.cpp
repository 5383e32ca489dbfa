#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ctrlcap/ctrlcap.hpp"

using namespace ctrlcap;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "ctrlcap_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

Checkpoint sample_checkpoint() {
  ModelConfig mc;
  mc.vocab_size = 9;
  mc.embed_dim = 3;
  mc.feat_dim = 4;
  mc.hidden = 5;
  mc.att_dim = 2;
  mc.seed = 11;
  SortNetConfig sc;
  sc.feat_dim = 4;
  sc.emb_dim = 2;
  sc.visual1 = 3;
  sc.visual2 = 3;
  sc.textual = 2;
  sc.merge = 3;
  sc.n_max = 4;
  sc.temperature = 0.1;
  Checkpoint ck;
  ck.model = ModelParams::init(mc);
  ck.sorter = SortNetParams::init(sc);
  ck.meta = {{"phase", "xe"}, {"epochs", 3}};
  // Values that need all 17 significant digits.
  ck.model->out_b.mutable_data()[0] = 0.1 + 0.2;
  ck.model->out_b.mutable_data()[1] = 1.0 / 3.0;
  return ck;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  out << j.dump();
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto ck = sample_checkpoint();
  const auto path = temp_file("roundtrip.json");
  save_checkpoint(ck, path.string());
  const auto back = load_checkpoint(path.string());
  ASSERT_TRUE(back.model && back.sorter);
  const auto a = ck.model->named(), b = back.model->named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.shape(), b[i].second.shape());
    EXPECT_EQ(a[i].second.to_vector(), b[i].second.to_vector()) << a[i].first;
  }
  const auto sa = ck.sorter->named(), sb = back.sorter->named();
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_EQ(sa[i].second.to_vector(), sb[i].second.to_vector());
  EXPECT_EQ(back.sorter->config.temperature, 0.1);
  EXPECT_EQ(back.model->config.seed, 11u);
  EXPECT_EQ(back.meta, ck.meta);
  // A reloaded model computes the same outputs.
  const Region r{{0.1, 0.2, 0.3, 0.4}, 0, {}, {}};
  ControlSignal c;
  c.sets.push_back(RegionSet{{0}, {r}});
  const std::vector<double> desc{0.1, 0.2, 0.3, 0.4};
  EXPECT_EQ(greedy_decode(*ck.model, desc, c, 6), greedy_decode(*back.model, desc, c, 6));
}

TEST(Checkpoint, OptionalSectionsMayBeAbsent) {
  Checkpoint ck;
  ck.sorter = sample_checkpoint().sorter;
  const auto path = temp_file("sorter_only.json");
  save_checkpoint(ck, path.string());
  const auto j = read_json(path);
  EXPECT_TRUE(j["model"].is_null());
  EXPECT_EQ(j["format"], kCheckpointFormat);
  EXPECT_EQ(j["version"], kCheckpointVersion);
  const auto back = load_checkpoint(path.string());
  EXPECT_FALSE(back.model.has_value());
  EXPECT_TRUE(back.sorter.has_value());
}

TEST(Checkpoint, RejectsWrongVersionAndFormat) {
  const auto path = temp_file("version.json");
  save_checkpoint(sample_checkpoint(), path.string());
  auto j = read_json(path);
  j["version"] = 99;
  write_json(path, j);
  EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
  j["version"] = kCheckpointVersion;
  j["format"] = "something-else";
  write_json(path, j);
  EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
}

TEST(Checkpoint, RejectsShapeMismatchAndMissingTensors) {
  const auto path = temp_file("shape.json");
  save_checkpoint(sample_checkpoint(), path.string());
  const auto good = read_json(path);
  auto j = good;
  j["model"]["params"]["out_b"]["shape"] = {10};
  write_json(path, j);
  EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
  j = good;
  j["model"]["params"]["out_b"]["values"].erase(0);
  write_json(path, j);
  EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
  j = good;
  j["model"]["params"].erase("embed");
  write_json(path, j);
  EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
  j = good;
  j["model"]["config"]["hidden"] = 6;
  write_json(path, j);
  EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
}

TEST(Checkpoint, MalformedAndMissingFiles) {
  const auto path = temp_file("garbage.json");
  {
    std::ofstream out(path);
    out << "{not json";
  }
  EXPECT_THROW(load_checkpoint(path.string()), CheckpointError);
  EXPECT_THROW(load_checkpoint(temp_file("does_not_exist.json").string()), IoError);
}
