#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "promptrl/config.hpp"

using namespace promptrl;

namespace {

std::string error_path(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigInvalid);
    return e.path();
  }
  ADD_FAILURE() << "accepted: " << text;
  return {};
}

}  // namespace

TEST(Config, EmptyObjectGivesDefaults) {
  const auto c = parse_config("{}");
  EXPECT_EQ(c, ExperimentConfig{});
  EXPECT_EQ(c.grpo.group.n, 8);
  EXPECT_EQ(c.grpo.group.m, 2);
  EXPECT_EQ(c.grpo.group.batch, 8);
  EXPECT_EQ(c.fm.schedule.steps, 20);
  EXPECT_EQ(c.fm.schedule.noise, 0.25);
  EXPECT_EQ(c.rewards.weights.format, 1.0);
  EXPECT_EQ(c.rewards.weights.gen, 1.0);
  EXPECT_EQ(c.precision, 64);
}

TEST(Config, RoundTripsThroughJson) {
  auto c = parse_config(R"({"seed": 9, "precision": 32, "grpo": {"n": 4, "m": 1, "iterations": 7},
                            "rewards": {"tag_mode": "multi", "reward_target": "refined"},
                            "fm": {"hidden": [32, 16], "pretrain": {"confusion": "uniform"}}})");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.grpo.group.n, 4);
  EXPECT_EQ(c.fm.hidden, (std::vector<std::size_t>{32, 16}));
  const auto again = config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(again, c);
  EXPECT_EQ(to_json(again).dump(), to_json(c).dump());
}

TEST(Config, RetentionAboveGroupSizeIsRejected) {
  EXPECT_EQ(error_path(R"({"grpo": {"n": 4, "m": 8}})"), "grpo.m");
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_EQ(error_path(R"({"grpo": {"mm": 1}})"), "grpo.mm");
  EXPECT_EQ(error_path(R"({"colour": 1})"), "colour");
  EXPECT_EQ(error_path(R"({"fm": {"pretrain": {"stepz": 1}}})"), "fm.pretrain.stepz");
}

TEST(Config, TypeAndRangeErrorsNameTheField) {
  EXPECT_EQ(error_path(R"({"seed": "x"})"), "seed");
  EXPECT_EQ(error_path(R"({"fm": {"hidden": [-3]}})"), "fm.hidden");
  EXPECT_EQ(error_path(R"({"fm": {"sde_steps": 30}})"), "fm.sde_steps");
  EXPECT_EQ(error_path(R"({"precision": 16})"), "precision");
  EXPECT_EQ(error_path(R"({"rewards": {"tag": "BEST"}})"), "rewards.tag");
  EXPECT_EQ(error_path(R"({"grpo": {"eps_stab": 0}})"), "grpo.eps_stab");
  EXPECT_EQ(error_path(R"({"fm": {"pretrain": {"curated_fillers": ["red"]}}})"), "fm.pretrain.curated_fillers");
  EXPECT_EQ(error_path("[1, 2]"), "<root>");
  EXPECT_EQ(error_path("{not json"), "<string>");
}

TEST(Config, LoadsFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "promptrl_config_test.json";
  {
    std::ofstream(path) << R"({"grpo": {"iterations": 3}})";
  }
  EXPECT_EQ(load_config(path).grpo.iterations, 3);
  std::filesystem::remove(path);
  EXPECT_THROW(load_config(path), ConfigError);
}

TEST(Config, ShippedExampleConfigsLoad) {
  const std::filesystem::path dir = PROMPTRL_SOURCE_DIR "/examples_cfg";
  int seen = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".json") {
      EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
      ++seen;
    }
  }
  EXPECT_GE(seen, 1);
}
