#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string(MJLAB_CLI) + " " + args;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return {};
  Outcome o;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe) != nullptr) o.out += buf.data();
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

fs::path tiny_config(const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json j = {
      {"model", {{"d_model", 16}, {"d_ff", 24}, {"n_layers", 2}, {"n_heads", 2}}},
      {"pretrain", {{"steps", 0}}},
      {"data", {{"n_per_task", 12}}},
      {"router", {{"kmeans_samples", 40}, {"kmeans_iters", 3}}},
      {"train", {{"epochs", 1}, {"batch_size", 8}}},
      {"seeds", {0}},
      {"out_dir", (dir / "runs").string()},
  };
  const fs::path p = dir / "cfg.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST(Cli, OracleRankPrintsWorkedExample) {
  const auto o = run("oracle rank --instances 20");
  EXPECT_EQ(o.code, 0);
  EXPECT_NE(o.out.find("rank_mj=2 rank_peft=1"), std::string::npos) << o.out;
}

TEST(Cli, MissingConfigExitsOneAndNamesPath) {
  const auto o = run("train --config /nonexistent/missing.json 2>&1");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.out.find("/nonexistent/missing.json"), std::string::npos) << o.out;
}

TEST(Cli, InvalidValueExitsOne) {
  const fs::path dir = fs::temp_directory_path() / "mjlab_cli_bad";
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << R"({"router": {"top_k": 7}})";
  EXPECT_EQ(run("train --config " + (dir / "bad.json").string() + " 2>/dev/null").code, 1);
  EXPECT_EQ(run("frobnicate 2>/dev/null").code, 1);
  fs::remove_all(dir);
}

TEST(Cli, DumpConfigFeedsBack) {
  const fs::path dir = fs::temp_directory_path() / "mjlab_cli_dump";
  const fs::path cfg = tiny_config(dir);
  const auto first = run("train --dump-config --config " + cfg.string());
  ASSERT_EQ(first.code, 0);
  std::ofstream(dir / "dumped.json") << first.out;
  const auto second = run("train --dump-config --config " + (dir / "dumped.json").string());
  EXPECT_EQ(first.out, second.out);
  fs::remove_all(dir);
}

TEST(Cli, ReportCopiesAccuracyVerbatim) {
  const fs::path dir = fs::temp_directory_path() / "mjlab_cli_report";
  fs::remove_all(dir);
  const fs::path cfg = tiny_config(dir);
  const auto trained = run("train --quiet --config " + cfg.string());
  ASSERT_EQ(trained.code, 0);
  fs::path root;
  for (const auto& e : fs::directory_iterator(dir / "runs"))
    if (e.is_directory() && e.path().filename().string().rfind("backbone-", 0) != 0) root = e.path();
  ASSERT_FALSE(root.empty());
  const auto rep = run("report --quiet --run " + root.string() + " --out " + (dir / "summary").string());
  ASSERT_EQ(rep.code, 0);
  const auto summary = nlohmann::ordered_json::parse(slurp(dir / "summary" / "summary.json"));
  const auto report = nlohmann::ordered_json::parse(slurp(root / "seed0" / "report.json"));
  EXPECT_EQ(summary["runs"][0]["task_accuracy"].dump(), report["task_accuracy"].dump());
  EXPECT_EQ(summary["runs"][0]["mean_accuracy"].dump(), report["mean_accuracy"].dump());
  // the raw text of each accuracy appears unchanged in both files
  for (const auto& acc : report["task_accuracy"])
    EXPECT_NE(slurp(dir / "summary" / "summary.json").find(acc.dump()), std::string::npos);
  EXPECT_TRUE(fs::exists(root / "usage_heatmap.csv"));

  // rerunning into the same directory reproduces the checkpoint bytes
  const std::string ckpt = slurp(root / "seed0" / "report.json");
  ASSERT_EQ(run("train --quiet --config " + cfg.string()).code, 0);
  EXPECT_EQ(slurp(root / "seed0" / "report.json"), ckpt);
  fs::remove_all(dir);
}
