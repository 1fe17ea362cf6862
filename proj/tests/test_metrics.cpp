#include <gtest/gtest.h>

#include "testing.hpp"

using namespace promptrl;
using namespace promptrl::metrics;

namespace {

struct Fixture {
  World world;
  Splits splits;
  flow::FlowModel<double> fm;

  Fixture() {
    RngStream split(1);
    splits = build_splits(world, split, false);
    RngStream rng(2);
    fm = flow::FlowModel<double>::random(flow::FmSpec{world.vocab.size(), 8, {16, 16}}, rng, 1.0);
  }
};

EvalOptions quick(int samples = 16) {
  EvalOptions o;
  o.samples_per_prompt = samples;
  o.seed = 3;
  return o;
}

/// A refiner that ends every answer immediately, so it never formats.
lm::RefinerModel<double> mute_refiner(const World& w) {
  RngStream rng(4);
  auto lm = lm::RefinerModel<double>::random(lm::LmSpec{w.vocab.size()}, rng);
  auto head = lm.head(lm.params());
  head[head.size() - w.vocab.size() + static_cast<std::size_t>(w.vocab.eos())] = 50.0;
  return lm;
}

grpo::IterationRecord record(std::int64_t iter, double goal) {
  grpo::IterationRecord r;
  r.iter = iter;
  r.rollouts = iter * 64;
  r.mode = "promptrl";
  r.tag_mix = {{"GOAL", 8}};
  r.mean_reward_per_tag = {{"GOAL", goal}};
  return r;
}

}  // namespace

TEST(Dispersion, Examples) {
  const std::vector<Point<double>> same(5, Point<double>{1.0, -2.0});
  EXPECT_EQ(dispersion<double>(same), 0.0);
  const std::vector<Point<double>> two{{0.0, 0.0}, {3.0, 4.0}};
  EXPECT_DOUBLE_EQ(dispersion<double>(two), 5.0);
  const std::vector<Point<double>> one{{0.0, 0.0}};
  try {
    dispersion<double>(one);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewPoints);
  }
}

TEST(Dispersion, StandardGaussianCloud) {
  RngStream rng(5);
  std::vector<Point<double>> cloud(1000);
  for (auto& p : cloud) {
    p = {rng.normal(), rng.normal()};
  }
  EXPECT_NEAR(dispersion<double>(cloud), std::sqrt(std::numbers::pi), 0.05);
}

TEST(Dispersion, Invariances) {
  RngStream rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Point<double>> pts(30);
    for (auto& p : pts) {
      p = {3 * rng.normal(), rng.normal()};
    }
    const double base = dispersion<double>(pts);
    auto shuffled = pts;
    std::reverse(shuffled.begin(), shuffled.end());
    std::swap(shuffled[0], shuffled[7]);
    EXPECT_NEAR(dispersion<double>(shuffled), base, 1e-12);
    auto moved = pts;
    const double s = 0.1 + 5 * rng.uniform();
    for (auto& p : moved) {
      p = {p[0] + 17.0, p[1] - 4.0};
    }
    EXPECT_NEAR(dispersion<double>(moved), base, 1e-9);
    for (auto& p : moved) {
      p = {s * p[0], s * p[1]};
    }
    EXPECT_NEAR(dispersion<double>(moved), s * base, 1e-9 * s);
  }
}

TEST(EvalSuite, AggregatesMatchRows) {
  const Fixture f;
  const auto report = eval_suite(f.world, f.fm, static_cast<const lm::RefinerModel<double>*>(nullptr), f.splits, quick());
  ASSERT_EQ(report.rows.size(), 24u);
  double so = 0, sp = 0;
  for (const auto& r : report.rows) {
    (r.split == "original" ? so : sp) += r.mean_reward;
    EXPECT_GE(r.dispersion, 0.0);
  }
  EXPECT_NEAR(report.mean_original, so / 8, 1e-12);
  EXPECT_NEAR(report.mean_paraphrase, sp / 16, 1e-12);
  EXPECT_NEAR(report.paraphrase_gap, so / 8 - sp / 16, 1e-12);
  EXPECT_FALSE(report.format_rate.has_value());
}

TEST(EvalSuite, Deterministic) {
  const Fixture f;
  const lm::RefinerModel<double>* none = nullptr;
  EXPECT_EQ(eval_suite(f.world, f.fm, none, f.splits, quick()).to_json(),
            eval_suite(f.world, f.fm, none, f.splits, quick()).to_json());
  auto other = quick();
  other.seed = 4;
  EXPECT_NE(eval_suite(f.world, f.fm, none, f.splits, quick()).to_json(),
            eval_suite(f.world, f.fm, none, f.splits, other).to_json());
}

TEST(EvalSuite, UnformattedRefinerFallsBackToOriginalPrompt) {
  const Fixture f;
  const auto mute = mute_refiner(f.world);
  const auto with = eval_suite(f.world, f.fm, &mute, f.splits, quick());
  const auto without = eval_suite(f.world, f.fm, static_cast<const lm::RefinerModel<double>*>(nullptr), f.splits, quick());
  ASSERT_EQ(with.format_rate, 0.0);
  ASSERT_EQ(with.rows.size(), without.rows.size());
  for (std::size_t i = 0; i < with.rows.size(); ++i) {
    EXPECT_EQ(with.rows[i].mean_reward, without.rows[i].mean_reward);
    EXPECT_EQ(with.rows[i].dispersion, without.rows[i].dispersion);
  }
}

TEST(Transfer, SameGeneratorEqualsStandardEval) {
  const Fixture f;
  RngStream rng(7);
  const auto lm = lm::RefinerModel<double>::random(lm::LmSpec{f.world.vocab.size()}, rng);
  EXPECT_EQ(transfer_eval(f.world, lm, f.fm, f.splits, quick()).to_json(),
            eval_suite(f.world, f.fm, &lm, f.splits, quick()).to_json());
}

TEST(Transfer, IdentityRefinerMatchesBaselineOnForeignGenerator) {
  auto cfg = ExperimentConfig{};
  cfg.lm.sft.filler_prompts = false;
  cfg.lm.sft.target_nll = 0.01;
  cfg.fm.pretrain.steps = 3000;
  const Pipeline<double> pipe(cfg);
  const auto foreign = pipe.pretrain_foreign_fm();
  lm::SftReport sft;
  const auto lm = pipe.pretrain_lm(&sft);
  ASSERT_TRUE(sft.converged);
  auto opts = pipe.eval_options();
  opts.samples_per_prompt = 42;  // 24 prompts, ~1000 samples
  const auto with = transfer_eval(pipe.world(), lm, foreign, pipe.splits(), opts);
  const auto base = eval_suite(pipe.world(), foreign, static_cast<const lm::RefinerModel<double>*>(nullptr),
                               pipe.splits(), opts);
  EXPECT_NEAR(with.mean_all(), base.mean_all(), 0.03);
}

TEST(RolloutsToThreshold, Examples) {
  std::vector<grpo::IterationRecord> above{record(1, 1.9), record(2, 1.95)};
  EXPECT_EQ(rollouts_to_threshold(above, 1.6), 64);
  std::vector<grpo::IterationRecord> never{record(1, 0.2), record(2, 1.0), record(3, 1.5)};
  EXPECT_FALSE(rollouts_to_threshold(never, 1.6).has_value());
  std::vector<grpo::IterationRecord> ramp;
  for (int i = 1; i <= 10; ++i) {
    ramp.push_back(record(i, i <= 3 ? 0.0 : 2.0));
  }
  // Trailing windows at iterations 6, 7 average 1.6 and 2.0.
  EXPECT_EQ(rollouts_to_threshold(ramp, 1.6), 7 * 64);
  EXPECT_EQ(rollouts_to_threshold(ramp, 1.2), 6 * 64);
}

TEST(RewardSeries, MixedTagsAreWeightedByDraws) {
  auto r = record(1, 2.0);
  r.tag_mix = {{"GOAL", 3}, {"PREF", 1}};
  r.mean_reward_per_tag = {{"GOAL", 2.0}, {"PREF", 100.0}};
  const std::vector<grpo::IterationRecord> log{r};
  EXPECT_DOUBLE_EQ(reward_series(log)[0], (3 * 2.0 + 100.0) / 4);
  EXPECT_EQ(reward_series(log, "PREF")[0], 100.0);
  EXPECT_THROW(reward_series(std::vector<grpo::IterationRecord>{record(1, 1.0)}, std::string("PREF")), Error);
}

TEST(ParseLog, RoundTripAndErrors) {
  std::string text;
  for (int i = 1; i <= 3; ++i) {
    text += record(i, 0.5 * i).to_json().dump() + "\n";
  }
  const auto log = parse_log(text);
  ASSERT_EQ(log.size(), 3u);
  EXPECT_EQ(log[2].mean_reward_per_tag.at("GOAL"), 1.5);
  auto code = [](const std::string& s) {
    try {
      parse_log(s);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::InvalidArgument;
  };
  EXPECT_EQ(code(text + "{not json\n"), ErrorCode::MalformedLog);
  EXPECT_EQ(code("{\"iter\": 1}\n"), ErrorCode::MalformedLog);
}

TEST(EnergyTest, SeparatesShiftedFromIdentical) {
  RngStream rng(8);
  std::vector<Point<double>> a(200), b(200), c(200);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = {rng.normal(), rng.normal()};
    b[i] = {rng.normal(), rng.normal()};
    c[i] = {rng.normal() + 0.5, rng.normal()};
  }
  EXPECT_NEAR(energy_distance<double>(a, a), 0.0, 1e-12);
  EXPECT_GE(energy_distance<double>(a, b), 0.0);
  RngStream perm(9);
  const auto same = energy_permutation_test<double>(a, b, 199, perm);
  const auto shifted = energy_permutation_test<double>(a, c, 199, perm);
  EXPECT_GT(same.p_value, 0.01);
  EXPECT_LE(shifted.p_value, 0.01);
  EXPECT_GT(shifted.statistic, shifted.null_quantile_99);
  EXPECT_EQ(shifted.null_distribution.size(), 199u);
}
