#include <gtest/gtest.h>

#include "testing.hpp"

using namespace promptrl;

namespace {

std::optional<Prompt> parse(const World& w, std::initializer_list<const char*> words) {
  return parse_answer(w.vocab, w.vocab.encode(std::vector<std::string>(words.begin(), words.end())));
}

Point<double> at_distance(const World& w, const Semantics& sem, double d, double angle = 0.7) {
  const auto m = w.spec.mean(w.spec.component_index(sem));
  return {m[0] + d * std::cos(angle), m[1] + d * std::sin(angle)};
}

}  // namespace

TEST(ParseAnswer, WellFormed) {
  const World w;
  EXPECT_EQ(parse(w, {"<answer>", "red", "ring", "</answer>", "<eos>"}), w.vocab.encode({"red", "ring"}));
  EXPECT_EQ(parse(w, {"<answer>", "the", "crimson", "very", "ring", "</answer>", "<eos>"}),
            w.vocab.encode({"the", "crimson", "very", "ring"}));
}

TEST(ParseAnswer, MissingTags) {
  const World w;
  EXPECT_FALSE(parse(w, {"red", "ring", "<eos>"}));
  EXPECT_FALSE(parse(w, {"red", "ring", "</answer>", "<eos>"}));
  EXPECT_FALSE(parse(w, {"<answer>", "red", "<eos>"}));
  EXPECT_FALSE(parse(w, {"<answer>", "red", "ring", "<eos>"}));
}

TEST(ParseAnswer, NothingAfterCloseButEos) {
  const World w;
  EXPECT_FALSE(parse(w, {"<answer>", "red", "ring", "</answer>", "red", "<eos>"}));
  EXPECT_FALSE(parse(w, {"<answer>", "red", "ring", "</answer>", "<eos>", "<eos>"}));
  EXPECT_FALSE(parse(w, {"red", "<answer>", "red", "ring", "</answer>", "<eos>"}));
}

TEST(ParseAnswer, EmptyNestedAndTagOnly) {
  const World w;
  EXPECT_FALSE(parse(w, {"<answer>", "</answer>", "<eos>"}));
  EXPECT_FALSE(parse(w, {"<answer>", "red", "<answer>", "ring", "</answer>", "</answer>", "<eos>"}));
  EXPECT_FALSE(parse(w, {"<answer>", "</answer>", "<answer>", "</answer>", "<eos>"}));
  EXPECT_FALSE(parse(w, {"<answer>", "the", "very", "</answer>", "<eos>"}));
}

TEST(ParseAnswer, EosPlacement) {
  const World w;
  // Sequences cut at the length cap carry no EOS.
  EXPECT_EQ(parse(w, {"<answer>", "red", "ring", "</answer>"}), w.vocab.encode({"red", "ring"}));
  EXPECT_FALSE(parse(w, {"<answer>", "red", "<eos>", "ring", "</answer>"}));
  EXPECT_FALSE(parse(w, {"<eos>"}));
  EXPECT_FALSE(parse_answer(w.vocab, Prompt{}));
}

TEST(GenReward, ClosedFormCases) {
  const World w;
  const Semantics sem{2, 1};
  const auto m = w.spec.mean(w.spec.component_index(sem));
  const Point<double> center{m[0], m[1]};
  EXPECT_EQ(gen_reward(w, RewardTag::Goal, center, sem), 1.0);
  EXPECT_EQ(gen_reward(w, RewardTag::Pref, center, sem), 100.0);
  EXPECT_EQ(gen_reward(w, RewardTag::Goal, at_distance(w, sem, 0.45 + 1e-9), sem), 0.0);
  EXPECT_EQ(gen_reward(w, RewardTag::Goal, at_distance(w, sem, 0.45 - 1e-9), sem), 1.0);
  EXPECT_NEAR(gen_reward(w, RewardTag::Pref, at_distance(w, sem, 0.6), sem), 60.653, 1e-3);
}

TEST(GenReward, RangesPerTag) {
  const World w;
  RngStream rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto sem = w.spec.semantics_of(static_cast<int>(rng.uniform_int(8)));
    const Point<double> x{4 * rng.normal(), 4 * rng.normal()};
    const double goal = gen_reward(w, RewardTag::Goal, x, sem);
    EXPECT_TRUE(goal == 0.0 || goal == 1.0);
    const double pref = gen_reward(w, RewardTag::Pref, x, sem);
    EXPECT_GE(pref, 0.0);
    EXPECT_LE(pref, 100.0);
  }
}

TEST(Composite, Examples) {
  const RewardWeights d;
  EXPECT_EQ(composite(1, 1, d), 2.0);
  EXPECT_EQ(composite(0, 0, d), 0.0);
  EXPECT_NEAR(composite(1, 60.653, d), 61.653, 1e-12);
  EXPECT_EQ(max_composite(RewardTag::Goal, d), 2.0);
  EXPECT_EQ(max_composite(RewardTag::Pref, d), 101.0);
}

TEST(Composite, AffineInEachComponent) {
  RngStream rng(2);
  for (int i = 0; i < 200; ++i) {
    const RewardWeights w{3 * rng.uniform(), 3 * rng.uniform()};
    const double f = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const double g1 = 100 * rng.uniform(), g2 = 100 * rng.uniform();
    EXPECT_NEAR(composite(f, g1, w) - composite(f, g2, w), w.gen * (g1 - g2), 1e-9);
    EXPECT_NEAR(composite(1, g1, w) - composite(0, g1, w), w.format, 1e-12);
  }
}

TEST(EvaluateSample, Examples) {
  const World w;
  const Semantics sem{1, 0};
  const auto m = w.spec.mean(w.spec.component_index(sem));
  const Point<double> center{m[0], m[1]};
  const RewardWeights d;

  SampleView<double> original{false, true, nullptr, center, RewardTag::Goal};
  EXPECT_EQ(evaluate_sample(w, original, sem, d).total, 2.0);

  SampleView<double> malformed{true, false, nullptr, center, RewardTag::Goal};
  const auto r = evaluate_sample(w, malformed, sem, d);
  EXPECT_EQ(r.r_format, 0.0);
  EXPECT_EQ(r.r_gen, 1.0);
  EXPECT_EQ(r.total, 1.0);

  const Prompt refined = w.vocab.encode({"azure", "ring"});
  SampleView<double> far{true, true, &refined, {-5.0, 5.0}, RewardTag::Goal};
  EXPECT_EQ(evaluate_sample(w, far, sem, d).total, 1.0);
}

TEST(EvaluateSample, JudgedAgainstOriginalUnlessConfigured) {
  const World w;
  const Semantics asked{0, 0};
  const Semantics drifted{3, 1};
  const auto m = w.spec.mean(w.spec.component_index(drifted));
  const Prompt refined = make_prompt(w, drifted, 0);
  SampleView<double> s{true, true, &refined, {m[0], m[1]}, RewardTag::Goal};
  EXPECT_EQ(evaluate_sample(w, s, asked, RewardWeights{}).r_gen, 0.0);
  EXPECT_EQ(evaluate_sample(w, s, asked, RewardWeights{}, RewardTarget::Refined).r_gen, 1.0);
}

TEST(RewardTag, TextRoundTrip) {
  for (auto tag : {RewardTag::Goal, RewardTag::Pref}) {
    EXPECT_EQ(parse_tag(to_string(tag)), tag);
  }
  EXPECT_THROW(parse_tag("goal"), Error);
}
