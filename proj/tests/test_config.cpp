#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mjlab/config.hpp"

using namespace mjlab;

TEST(Config, DefaultsValidateAndRoundTrip) {
  const ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  const auto j = to_json(c);
  const auto back = config_from_json(j);
  EXPECT_EQ(to_json(back).dump(), j.dump());
  EXPECT_EQ(config_hash(j), config_hash(to_json(back)));
  EXPECT_EQ(config_hash(j).size(), 16u);
}

TEST(Config, PartialJsonKeepsDefaults) {
  const auto c = config_from_json(nlohmann::json::parse(R"({"train": {"lr": 0.5}, "seeds": [4]})"));
  EXPECT_EQ(c.train.lr, 0.5);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4}));
  EXPECT_EQ(c.train.epochs, ExperimentConfig{}.train.epochs);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"trian": {}})")), ConfigError);
  try {
    config_from_json(nlohmann::json::parse(R"({"router": {"tua": 1.0}})"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("tua"), std::string::npos);
  }
}

TEST(Config, BadValuesRejected) {
  for (const char* text : {R"({"train": {"warmup_ratio": 1.0}})", R"({"train": {"lr": -1}})",
                           R"({"router": {"top_k": 9}})", R"({"router": {"beta": 1.5}})",
                           R"({"adapter": {"rank": 0}})", R"({"model": {"n_heads": 3}})",
                           R"({"seeds": []})", R"({"train": {"method": "magic"}})",
                           R"({"train": {"epochs": "two"}})"}) {
    EXPECT_THROW(config_from_json(nlohmann::json::parse(text)).validate(), ConfigError) << text;
  }
}

TEST(Config, HashChangesWithRouterTau) {
  ExperimentConfig a, b;
  b.routing.router.tau = 0.5;
  EXPECT_NE(config_hash(to_json(a)), config_hash(to_json(b)));
}

TEST(Config, MissingFileNamesPath) {
  try {
    load_config("/nonexistent/cfg.json");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/cfg.json"), std::string::npos);
  }
}

TEST(Config, FileRoundTrip) {
  ExperimentConfig c;
  c.train.method = Method::MoE;
  c.moe.experts = 3;
  const auto path = std::filesystem::temp_directory_path() / "mjlab_cfg.json";
  std::ofstream(path) << to_json(c).dump(2);
  const auto back = load_config(path);
  EXPECT_EQ(back.train.method, Method::MoE);
  EXPECT_EQ(back.moe.experts, 3u);
  std::filesystem::remove(path);
}

TEST(Config, MonkeyJumpTargetsRoutedAndShared) {
  ExperimentConfig c;
  const auto t = c.adapter_targets();
  EXPECT_EQ(t.size(), 5u);
  c.train.method = Method::Head;
  EXPECT_TRUE(c.adapter_targets().empty());
}
