#include <gtest/gtest.h>

#include "testing.hpp"

using namespace promptrl;
using namespace promptrl::flow;
using promptrl::testing::fd_error;

namespace {

FlowModel<double> random_fm(const World& w, std::uint64_t seed, std::vector<std::size_t> hidden = {16, 16}) {
  RngStream rng(seed);
  return FlowModel<double>::random(FmSpec{w.vocab.size(), 8, std::move(hidden)}, rng, 1.0);
}

Prompt red_ring(const World& w) { return w.vocab.encode({"red", "ring"}); }

/// Generators pretrained on clean captions, shared by the slower tests.
class Pretrained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    world_ = new World();
    RngStream rng(2024);
    fm_ = new FlowModel<double>(FlowModel<double>::random(FmSpec{world_->vocab.size()}, rng));
    report_ = new PretrainReport(cfm_pretrain(*fm_, *world_, pretraining_corpus(*world_), rng, PretrainOptions{}));

    single_world_ = new World(promptrl::testing::single_component_world());
    RngStream rng1(77);
    single_fm_ = new FlowModel<double>(FlowModel<double>::random(FmSpec{single_world_->vocab.size()}, rng1));
    PretrainOptions opt;
    opt.steps = 8000;
    cfm_pretrain(*single_fm_, *single_world_, pretraining_corpus(*single_world_), rng1, opt);
  }
  static void TearDownTestSuite() {
    delete fm_;
    delete report_;
    delete world_;
    delete single_fm_;
    delete single_world_;
  }

  static World* world_;
  static FlowModel<double>* fm_;
  static PretrainReport* report_;
  static World* single_world_;
  static FlowModel<double>* single_fm_;
};

World* Pretrained::world_ = nullptr;
FlowModel<double>* Pretrained::fm_ = nullptr;
PretrainReport* Pretrained::report_ = nullptr;
World* Pretrained::single_world_ = nullptr;
FlowModel<double>* Pretrained::single_fm_ = nullptr;

}  // namespace

TEST(Velocity, ZeroMlpGivesBias) {
  const World w;
  FlowModel<double> fm(FmSpec{w.vocab.size(), 8, {8}});
  auto mlp = fm.mlp_params_mut();
  mlp[mlp.size() - 2] = 0.25;
  mlp[mlp.size() - 1] = -3.0;
  const auto v = velocity(fm, Point<double>{1.0, 2.0}, 0.4, red_ring(w));
  EXPECT_EQ(v[0], 0.25);
  EXPECT_EQ(v[1], -3.0);
}

TEST(Velocity, DeterministicAndRejectsTOne) {
  const World w;
  const auto fm = random_fm(w, 1);
  const Point<double> x{0.3, -0.7};
  EXPECT_EQ(velocity(fm, x, 0.5, red_ring(w)), velocity(fm, x, 0.5, red_ring(w)));
  try {
    velocity(fm, x, 1.0, red_ring(w));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TSingular);
  }
}

TEST(Score, ClosedFormCases) {
  const Point<double> x{0.8, -1.5};
  const auto s0 = score_from_velocity(x, 0.0, Point<double>{5.0, 7.0});
  EXPECT_EQ(s0[0], -x[0]);
  EXPECT_EQ(s0[1], -x[1]);
  const auto s_half = score_from_velocity(x, 0.5, x);
  EXPECT_EQ(s_half[0], -x[0]);
  EXPECT_EQ(s_half[1], -x[1]);
  EXPECT_THROW(score_from_velocity(x, 1.0, x), Error);
}

TEST(SdeRollout, ZeroNoiseEqualsEulerIntegration) {
  const World w;
  const auto fm = random_fm(w, 2);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream rng(seed);
    const auto traj = sde_rollout(fm, red_ring(w), NoiseSchedule{20, 20, 0.0}, rng);
    Point<double> x = traj.states[0];
    for (int k = 0; k < 20; ++k) {
      const auto v = velocity(fm, x, k / 20.0, red_ring(w));
      x = {x[0] + (1.0 / 20.0) * v[0], x[1] + (1.0 / 20.0) * v[1]};
      ASSERT_EQ(traj.states[static_cast<std::size_t>(k) + 1], x);
    }
    EXPECT_TRUE(traj.step_logps.empty());
  }
}

TEST(SdeRollout, TrajectoryInvariants) {
  const World w;
  const auto fm = random_fm(w, 3);
  const NoiseSchedule sched{8, 4, 0.25};
  RngStream rng(9);
  const auto traj = sde_rollout(fm, red_ring(w), sched, rng);
  ASSERT_EQ(traj.states.size(), 9u);
  ASSERT_EQ(traj.step_logps.size(), 4u);
  const double dt = 1.0 / 8;
  for (std::size_t k = 0; k < 8; ++k) {
    if (k < 4) {
      EXPECT_EQ(traj.sigmas[k], 0.25);
      const double var = 0.25 * 0.25 * dt;
      const double dx = traj.states[k + 1][0] - traj.means[k][0];
      const double dy = traj.states[k + 1][1] - traj.means[k][1];
      const double expected = -(dx * dx + dy * dy) / (2 * var) - std::log(2 * std::numbers::pi * var);
      EXPECT_NEAR(traj.step_logps[k], expected, 1e-12);
    } else {
      EXPECT_EQ(traj.sigmas[k], 0.0);
      EXPECT_EQ(traj.states[k + 1], traj.means[k]);
    }
  }
}

TEST(SdeRollout, ZeroVelocityAtOriginHasZeroDrift) {
  const World w;
  FlowModel<double> fm(FmSpec{w.vocab.size(), 8, {8}});
  const Point<double> zero{0.0, 0.0};
  for (double t : {0.0, 0.3, 0.9}) {
    const auto v = velocity(fm, zero, t, red_ring(w));
    const auto mu = flow::detail::step_mean(zero, t, v, 0.25, 0.05);
    EXPECT_EQ(mu[0], 0.0);
    EXPECT_EQ(mu[1], 0.0);
  }
}

TEST(SdeRollout, NonFiniteStateReportsStep) {
  const World w;
  auto fm = random_fm(w, 4);
  auto mlp = fm.mlp_params_mut();
  mlp[mlp.size() - 1] = std::numeric_limits<double>::quiet_NaN();
  RngStream rng(1);
  try {
    sde_rollout(fm, red_ring(w), NoiseSchedule{}, rng);
    FAIL();
  } catch (const NonFiniteStateError& e) {
    EXPECT_EQ(e.step(), 0);
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteState);
  }
}

TEST(StepDensity, IntegratesToOneOnGrid) {
  const Point<double> mu{0.4, -0.2};
  const double var = 0.25 * 0.25 / 20.0;
  const double sd = std::sqrt(var);
  const int n = 400;
  const double lo = -7 * sd, hi = 7 * sd, h = (hi - lo) / n;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const Point<double> x{mu[0] + lo + (i + 0.5) * h, mu[1] + lo + (j + 0.5) * h};
      total += std::exp(flow::detail::gaussian_logpdf(x, mu, var)) * h * h;
    }
  }
  EXPECT_NEAR(total, 1.0, 0.02);
}

TEST(TrajectoryLogprob, StoredMatchesRecomputed) {
  const World w;
  const auto fm = random_fm(w, 5, {64, 64});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RngStream rng(seed);
    const auto traj = sde_rollout(fm, w.vocab.encode({"the", "navy", "box"}), NoiseSchedule{}, rng);
    EXPECT_NEAR(traj_logprob_grad(fm, traj).value, traj.logp(), 1e-9);
  }
}

TEST(TrajectoryLogprob, NoStochasticStepsGivesZero) {
  const World w;
  const auto fm = random_fm(w, 6);
  RngStream rng(1);
  const auto traj = sde_rollout(fm, red_ring(w), NoiseSchedule{20, 0, 0.25}, rng);
  const auto lp = traj_logprob_grad(fm, traj);
  EXPECT_EQ(lp.value, 0.0);
  for (double g : lp.grads.values()) {
    EXPECT_EQ(g, 0.0);
  }
}

TEST(TrajectoryLogprob, ScheduleMismatch) {
  const World w;
  const auto fm = random_fm(w, 7);
  RngStream rng(1);
  auto traj = sde_rollout(fm, red_ring(w), NoiseSchedule{}, rng);
  traj.schedule.sde_steps = 10;
  try {
    traj_logprob_grad(fm, traj);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ScheduleMismatch);
  }
}

TEST(TrajectoryLogprob, GradientMatchesFiniteDifferences) {
  const World w;
  const auto fm = random_fm(w, 8);
  RngStream rng(3);
  const auto traj = sde_rollout(fm, w.vocab.encode({"a", "jade", "hoop"}), NoiseSchedule{}, rng);
  RngStream probe(4);
  EXPECT_LT(fd_error(fm, [&](const FlowModel<double>& m) { return traj_logprob_grad(m, traj); }, 200, probe), 1e-4);
}

TEST(FmKl, ZeroAtReferenceAndNonNegative) {
  const World w;
  const auto fm = random_fm(w, 9);
  RngStream rng(5);
  const auto traj = sde_rollout(fm, red_ring(w), NoiseSchedule{}, rng);
  const auto same = fm_kl(fm, fm, traj);
  EXPECT_EQ(same.value, 0.0);
  for (double g : same.grads.values()) {
    EXPECT_EQ(g, 0.0);
  }
  RngStream noise(6);
  for (int i = 0; i < 10; ++i) {
    const auto other = promptrl::testing::perturbed(fm, noise, 0.05);
    EXPECT_GE(fm_kl(other, fm, traj).value, 0.0);
  }
}

TEST(FmKl, GradientMatchesFiniteDifferences) {
  const World w;
  const auto ref = random_fm(w, 10);
  RngStream noise(7);
  const auto fm = promptrl::testing::perturbed(ref, noise, 0.05);
  RngStream rng(8);
  const auto traj = sde_rollout(ref, red_ring(w), NoiseSchedule{}, rng);
  RngStream probe(9);
  EXPECT_LT(fd_error(fm, [&](const FlowModel<double>& m) { return fm_kl(m, ref, traj); }, 200, probe), 1e-4);
}

TEST(CfmLoss, ExactModelHasZeroLoss) {
  const World w;
  FlowModel<double> fm(FmSpec{w.vocab.size(), 8, {8}});
  auto mlp = fm.mlp_params_mut();
  mlp[mlp.size() - 2] = 1.5;
  mlp[mlp.size() - 1] = -0.5;
  std::vector<CfmExample<double>> batch;
  for (int i = 0; i < 4; ++i) {
    batch.push_back({red_ring(w), {0.1 * i, 0.2}, {0.1 * i + 1.5, -0.3}, 0.25 * i});
  }
  EXPECT_EQ(cfm_loss<double>(fm, batch, nullptr), 0.0);
}

TEST(CfmLoss, GradientMatchesFiniteDifferences) {
  const World w;
  const auto fm = random_fm(w, 11);
  RngStream rng(12);
  std::vector<CfmExample<double>> batch;
  for (int i = 0; i < 6; ++i) {
    const auto sem = w.spec.semantics_of(i);
    batch.push_back({make_prompt(w, sem, i % 3), {rng.normal(), rng.normal()}, sample_target(w, sem, rng), rng.uniform()});
  }
  auto fn = [&](const FlowModel<double>& m) {
    ValueAndGrad<double> out{0.0, m.params().zeros_like()};
    out.value = cfm_loss<double>(m, batch, &out.grads);
    return out;
  };
  RngStream probe(13);
  EXPECT_LT(fd_error(fm, fn, 200, probe), 1e-4);
}

TEST(Corpus, CoversEveryMeaningAndFormPairing) {
  const World w;
  const auto corpus = pretraining_corpus(w);
  EXPECT_EQ(corpus.size(), 8u * 9u);
  std::set<Prompt> prompts;
  for (const auto& e : corpus) {
    EXPECT_EQ(canonicalize(w, e.prompt), e.semantics);
    EXPECT_EQ(e.mislabel, 0.0);
    prompts.insert(e.prompt);
  }
  EXPECT_EQ(prompts.size(), corpus.size());
}

TEST(Corpus, SystematicConfusionTargetsAnotherComponent) {
  const World w;
  CaptionNoise noise;
  noise.by_variant = {0.1, 0.5, 0.3};
  noise.confusion = Confusion::Systematic;
  for (const auto& e : pretraining_corpus(w, noise)) {
    ASSERT_TRUE(e.confused_with.has_value());
    EXPECT_NE(*e.confused_with, e.semantics);
    EXPECT_GT(e.mislabel, 0.0);
  }
  noise.by_variant = {0.1, 1.0, 0.0};
  EXPECT_THROW(pretraining_corpus(w, noise), Error);
}

TEST_F(Pretrained, LossDropsBelowFifthOfInitial) {
  EXPECT_LT(report_->final_running_loss, 0.2 * report_->initial_loss)
      << "initial " << report_->initial_loss << " final " << report_->final_running_loss;
}

TEST_F(Pretrained, OdeEndpointsLandOnPromptedComponent) {
  int hits = 0;
  const int per = 125;
  for (int k = 0; k < 8; ++k) {
    const auto sem = world_->spec.semantics_of(k);
    const auto mean = world_->spec.mean(k);
    const auto cond = condition(*fm_, make_prompt(*world_, sem, k % 3));
    RngStream rng(500, static_cast<std::uint64_t>(k));
    for (int i = 0; i < per; ++i) {
      const auto x = ode_endpoint(*fm_, cond, Point<double>{rng.normal(), rng.normal()}, 20);
      hits += std::hypot(x[0] - mean[0], x[1] - mean[1]) <= 3 * world_->spec.component_std ? 1 : 0;
    }
  }
  EXPECT_GE(hits, static_cast<int>(0.9 * 8 * per)) << hits << " of " << 8 * per;
}

TEST_F(Pretrained, LateVelocityPointsAtTheComponent) {
  const auto mean = single_world_->spec.mean(0);
  const auto prompt = single_world_->vocab.encode({"red", "ring"});
  const double t = 0.9;
  const double var = (t * 0.15) * (t * 0.15) + (1 - t) * (1 - t);
  const double gain = t * 0.15 * 0.15 / var;
  // x is drawn from the source; on the flow's own t = 0.9 marginal even the
  // exact field only reaches ~93%, so that population cannot carry a 95% bound.
  RngStream rng(31);
  int toward = 0, exact_toward = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const Point<double> x{rng.normal(), rng.normal()};
    const Point<double> to_mean{mean[0] - x[0], mean[1] - x[1]};
    const auto v = velocity(*single_fm_, x, t, prompt);
    toward += v[0] * to_mean[0] + v[1] * to_mean[1] > 0 ? 1 : 0;
    Point<double> exact{};
    for (int d = 0; d < 2; ++d) {
      exact[d] = (mean[d] + gain * (x[d] - t * mean[d]) - x[d]) / (1 - t);
    }
    exact_toward += exact[0] * to_mean[0] + exact[1] * to_mean[1] > 0 ? 1 : 0;
  }
  EXPECT_GE(exact_toward, static_cast<int>(0.95 * n));
  EXPECT_GE(toward, static_cast<int>(0.95 * n)) << toward;
}

TEST_F(Pretrained, LearnedScoreMatchesGaussianMarginal) {
  const auto mean = single_world_->spec.mean(0);
  const auto prompt = single_world_->vocab.encode({"red", "ring"});
  const double t = 0.5;
  const double var = (t * 0.15) * (t * 0.15) + (1 - t) * (1 - t);
  RngStream rng(32);
  int good = 0;
  const int n = 400;
  for (int i = 0; i < n; ++i) {
    const Point<double> x{t * mean[0] + std::sqrt(var) * rng.normal(), t * mean[1] + std::sqrt(var) * rng.normal()};
    const auto s = score_from_velocity(x, t, velocity(*single_fm_, x, t, prompt));
    const Point<double> exact{-(x[0] - t * mean[0]) / var, -(x[1] - t * mean[1]) / var};
    const double cos = (s[0] * exact[0] + s[1] * exact[1]) / (std::hypot(s[0], s[1]) * std::hypot(exact[0], exact[1]));
    good += cos >= 0.9 ? 1 : 0;
  }
  EXPECT_GE(good, static_cast<int>(0.9 * n));
}
