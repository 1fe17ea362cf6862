#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "promptrl/config.hpp"
#include "promptrl/metrics.hpp"

namespace fs = std::filesystem;
using namespace promptrl;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("promptrl_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  /// Tiny models and a handful of iterations; every run takes well under a second.
  fs::path tiny_config(const std::string& extra_grpo = "", int precision = 64) const {
    const auto path = root_ / "tiny.json";
    std::ofstream(path) << R"({"seed": 3, "precision": )" << precision << R"(, "output_dir": ")"
                        << (root_ / "run").string() << R"(",
      "fm": {"hidden": [16, 16], "foreign_hidden": [16, 16], "pretrain": {"steps": 200}},
      "lm": {"sft": {"max_steps": 50}},
      "grpo": {"batch": 2, "iterations": 5, "checkpoint_every": 2)"
                        << extra_grpo << R"(},
      "eval": {"samples_per_prompt": 4}})";
    return path;
  }

  Result run(const std::string& args) const {
    const auto out = root_ / "stdout.txt";
    const auto err = root_ / "stderr.txt";
    const std::string cmd = std::string(PROMPTRL_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  fs::path root_;
};

nlohmann::json last_error_record(const std::string& err) {
  // Progress lines may precede the record, which is always the last line.
  const auto end = err.find_last_not_of('\n');
  const auto pos = err.rfind('\n', end);
  return nlohmann::json::parse(err.substr(pos == std::string::npos ? 0 : pos + 1));
}

}  // namespace

TEST_F(Cli, SelftestPassesAndReportsCounts) {
  const auto r = run("selftest");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("total: 27/27 passed"), std::string::npos) << r.out;
  const auto j = run("selftest --json");
  const auto report = nlohmann::json::parse(j.out);
  EXPECT_EQ(report["passed"], report["total"]);
}

TEST_F(Cli, TrainWritesCompleteRunDirectory) {
  const auto cfg = tiny_config();
  const auto r = run("train --mode promptrl --config " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto dir = root_ / "run";
  for (const auto* name : {"config.resolved.json", "log.jsonl", "eval_report.json", "checkpoints/fm_final.ckpt",
                           "checkpoints/lm_final.ckpt", "checkpoints/fm_2.ckpt", "checkpoints/lm_4.ckpt"}) {
    EXPECT_TRUE(fs::exists(dir / name)) << name;
  }
  EXPECT_EQ(load_config(dir / "config.resolved.json"), load_config(cfg));
  EXPECT_EQ(metrics::parse_log(slurp(dir / "log.jsonl")).size(), 5u);
  const auto report = nlohmann::json::parse(slurp(dir / "eval_report.json"));
  EXPECT_EQ(report["mode"], "promptrl");
  EXPECT_TRUE(report.contains("with_pe"));
  EXPECT_TRUE(report.contains("no_pe"));
}

TEST_F(Cli, TrainIsByteDeterministic) {
  const auto cfg = tiny_config();
  ASSERT_EQ(run("train --config " + cfg.string() + " --output-dir " + (root_ / "a").string()).code, 0);
  ASSERT_EQ(run("train --config " + cfg.string() + " --output-dir " + (root_ / "b").string()).code, 0);
  const auto a = slurp(root_ / "a" / "log.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(root_ / "b" / "log.jsonl"));
  ASSERT_EQ(run("train --config " + cfg.string() + " --seed 4 --output-dir " + (root_ / "c").string()).code, 0);
  EXPECT_NE(a, slurp(root_ / "c" / "log.jsonl"));
}

TEST_F(Cli, FlowOnlyAndSinglePrecisionRuns) {
  const auto cfg = tiny_config("", 32);
  const auto r = run("train --mode flow-only --config " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(slurp(root_ / "run" / "eval_report.json"));
  EXPECT_EQ(report["mode"], "flow-only");
  EXPECT_FALSE(report.contains("with_pe"));
  const auto log = metrics::parse_log(slurp(root_ / "run" / "log.jsonl"));
  ASSERT_FALSE(log.empty());
  EXPECT_EQ(log[0].mode, "flow-only");
}

TEST_F(Cli, CurvesRowPerIteration) {
  const auto cfg = tiny_config();
  ASSERT_EQ(run("train --config " + cfg.string()).code, 0);
  const auto csv = root_ / "curve.csv";
  const auto r = run("curves --log " + (root_ / "run" / "log.jsonl").string() + " --out " + csv.string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(slurp(csv));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "rollouts,reward,seed,mode");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_NE(line.find(",3,promptrl"), std::string::npos) << line;
  }
  EXPECT_EQ(rows, 5);
}

TEST_F(Cli, AblationSummaryOrderedByRetention) {
  const auto cfg = tiny_config();
  const auto r = run("ablate-retention --m 4,0,2,1 --config " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto summary = nlohmann::json::parse(slurp(root_ / "run" / "summary.json"));
  std::vector<int> ms;
  for (const auto& row : summary["rows"]) {
    ms.push_back(row["m"]);
    EXPECT_TRUE(fs::exists(root_ / "run" / ("m_" + std::to_string(ms.back())) / "log.jsonl"));
  }
  EXPECT_EQ(ms, (std::vector<int>{0, 1, 2, 4}));
  const auto resolved = load_config(root_ / "run" / "m_1" / "config.resolved.json");
  EXPECT_EQ(resolved.grpo.group.m, 1);
}

TEST_F(Cli, PretrainedCheckpointsFeedLaterStages) {
  const auto cfg = tiny_config();
  const auto pre = (root_ / "pre").string();
  ASSERT_EQ(run("pretrain-fm --config " + cfg.string() + " --output-dir " + pre).code, 0);
  ASSERT_EQ(run("pretrain-fm --foreign --config " + cfg.string() + " --output-dir " + pre).code, 0);
  ASSERT_EQ(run("pretrain-lm --config " + cfg.string() + " --output-dir " + pre).code, 0);
  for (const auto* name : {"fm_pretrained.ckpt", "fm_foreign.ckpt", "lm_sft.ckpt", "pretrain_lm_report.json"}) {
    EXPECT_TRUE(fs::exists(fs::path(pre) / name)) << name;
  }
  const auto fm = pre + "/fm_pretrained.ckpt";
  const auto lm = pre + "/lm_sft.ckpt";
  ASSERT_EQ(run("train --config " + cfg.string() + " --fm " + fm + " --lm " + lm).code, 0);

  const auto with = run("eval --with-pe --config " + cfg.string() + " --fm " + fm + " --lm " + lm);
  ASSERT_EQ(with.code, 0) << with.err;
  EXPECT_TRUE(nlohmann::json::parse(with.out)["format_rate"].is_number());
  const auto without = run("eval --no-pe --config " + cfg.string() + " --fm " + fm);
  ASSERT_EQ(without.code, 0) << without.err;
  EXPECT_TRUE(nlohmann::json::parse(without.out)["format_rate"].is_null());

  const auto t = run("transfer --config " + cfg.string() + " --lm " + lm + " --foreign-fm " + pre + "/fm_foreign.ckpt");
  ASSERT_EQ(t.code, 0) << t.err;
  const auto report = nlohmann::json::parse(slurp(root_ / "run" / "transfer_report.json"));
  EXPECT_TRUE(report.contains("improvement"));
}

TEST_F(Cli, InvalidConfigExitsTwoWithRecord) {
  std::ofstream(root_ / "bad.json") << R"({"grpo": {"n": 4, "m": 8}})";
  auto r = run("train --config " + (root_ / "bad.json").string());
  EXPECT_EQ(r.code, 2);
  auto rec = last_error_record(r.err);
  EXPECT_EQ(rec["error"], "ConfigInvalid");
  EXPECT_EQ(rec["path"], "grpo.m");

  std::ofstream(root_ / "unknown.json") << R"({"grpo": {"retain": 1}})";
  r = run("train --config " + (root_ / "unknown.json").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(last_error_record(r.err)["path"], "grpo.retain");

  r = run("ablate-retention --m 0,9 --config " + tiny_config().string());
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(root_ / "run" / "m_0"));

  r = run("train --mode sideways");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(last_error_record(r.err)["error"], "ConfigInvalid");
}

TEST_F(Cli, RuntimeFailureExitsOne) {
  const auto r = run("transfer --config " + tiny_config().string() + " --lm " + (root_ / "missing.ckpt").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(last_error_record(r.err)["error"], "Io");
  const auto c = run("curves --log " + (root_ / "missing.jsonl").string());
  EXPECT_EQ(c.code, 1);
}
