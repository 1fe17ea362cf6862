// SPDX-License-Identifier: Apache-2.0
//
// Built-in property checks: gradient exactness, SDE/ODE reduction, advantage
// algebra, selective routing and the answer parser. Shared by the `selftest`
// subcommand and the acceptance binary.
#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "promptrl/flowfm.hpp"
#include "promptrl/grpo.hpp"
#include "promptrl/lmpolicy.hpp"
#include "promptrl/nn.hpp"
#include "promptrl/rewards.hpp"
#include "promptrl/toyworld.hpp"

namespace promptrl::selftest {

inline constexpr double kGradientTolerance = 1e-4;
inline constexpr int kGradientProbes = 100;
inline constexpr double kAffineTolerance = 1e-12;

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct Section {
  std::string name;
  std::vector<Check> checks;

  void add(std::string check, bool passed, std::string detail = {}) {
    checks.push_back({std::move(check), passed, std::move(detail)});
  }
  int passed() const {
    return static_cast<int>(std::count_if(checks.begin(), checks.end(), [](const Check& c) { return c.passed; }));
  }
  int total() const { return static_cast<int>(checks.size()); }
  bool ok() const { return passed() == total(); }
};

struct Report {
  std::vector<Section> sections;

  int passed() const {
    int n = 0;
    for (const auto& s : sections) {
      n += s.passed();
    }
    return n;
  }
  int total() const {
    int n = 0;
    for (const auto& s : sections) {
      n += s.total();
    }
    return n;
  }
  bool ok() const { return passed() == total(); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["passed"] = passed();
    j["total"] = total();
    for (const auto& s : sections) {
      nlohmann::ordered_json sj;
      sj["passed"] = s.passed();
      sj["total"] = s.total();
      auto failures = nlohmann::ordered_json::array();
      for (const auto& c : s.checks) {
        if (!c.passed) {
          failures.push_back({{"check", c.name}, {"detail", c.detail}});
        }
      }
      sj["failures"] = failures;
      j["sections"][s.name] = sj;
    }
    return j;
  }
};

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

/// Max relative finite-difference error of fn(model) -> {value, grads}.
template <typename Model, typename Fn>
double fd_error(const Model& model, Fn&& fn, int probes, RngStream& rng, double h) {
  auto loss = [&](std::span<const double> p) {
    Model probe = model;
    std::copy(p.begin(), p.end(), probe.params().values().begin());
    auto out = fn(probe);
    const auto g = out.grads.values();
    return nn::LossAndGrad<double>{static_cast<double>(out.value), std::vector<double>(g.begin(), g.end())};
  };
  return nn::finite_diff_check<double>(loss, model.params().values(), probes, rng, h);
}

template <typename Model>
Model perturbed(Model m, RngStream& rng, double scale) {
  for (auto& v : m.params().values()) {
    v += scale * rng.normal();
  }
  return m;
}

struct Models {
  World world;
  std::vector<Prompt> prompts;
  flow::FlowModel<double> fm;
  lm::RefinerModel<double> lm;

  explicit Models(std::uint64_t seed) {
    RngStream rng(seed);
    for (int k = 0; k < world.num_components(); ++k) {
      prompts.push_back(make_prompt(world, world.spec.semantics_of(k), k % kNumVariants));
    }
    fm = flow::FlowModel<double>::random(flow::FmSpec{world.vocab.size(), 8, {16, 16}}, rng, 1.0);
    lm = lm::RefinerModel<double>::random(lm::LmSpec{world.vocab.size()}, rng);
  }
};

inline grpo::RunConfig small_run() {
  grpo::RunConfig c;
  c.group.batch = 2;
  c.schedule = flow::NoiseSchedule{8, 8, 0.25};
  return c;
}

template <typename Real>
std::vector<grpo::RolloutGroup<Real>> rollout_groups(const Models& m, const grpo::TrainState<Real>& st,
                                                     const grpo::RunConfig& c) {
  std::vector<grpo::RolloutGroup<Real>> groups;
  for (int g = 0; g < c.group.batch; ++g) {
    groups.push_back(grpo::build_group(m.world, m.prompts[static_cast<std::size_t>(g)], RewardTag::Goal, st, c, 0, g));
  }
  return groups;
}

/// Alternating-sign advantages per origin class.
inline void set_advantages(std::vector<grpo::RolloutGroup<double>>& groups, double original, double refined) {
  int k = 0;
  for (auto& g : groups) {
    for (auto& s : g.samples) {
      const double sign = (k++ % 2 == 0) ? 1.0 : -0.5;
      s.advantage = sign * (s.origin == grpo::Origin::Original ? original : refined);
    }
  }
}

inline bool all_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

}  // namespace detail

/// Finite-difference checks of every analytic gradient in the system.
inline Section gradients(std::uint64_t seed = 1, int probes = kGradientProbes) {
  using detail::fd_error;
  Section sec{"gradients", {}};
  const detail::Models m(seed);
  RngStream rng(seed, 1);
  auto record = [&](const std::string& name, double err) {
    sec.add(name, err < kGradientTolerance, "max relative error " + detail::fmt(err));
  };

  {
    const Prompt p = m.prompts[3];
    const Point<double> x{0.4, -1.1};
    const double t = 0.35;
    const Point<double> u{0.8, -1.3};
    auto fn = [&](const flow::FlowModel<double>& model) {
      const auto cond = flow::condition(model, p);
      const auto eval = flow::velocity_forward(model, cond, x, t);
      flow::ValueAndGrad<double> out{u[0] * eval.v[0] + u[1] * eval.v[1], model.params().zeros_like()};
      const auto dcond = flow::velocity_backward(model, eval, u, out.grads);
      flow::conditioning_backward<double>(model, cond, dcond, out.grads);
      return out;
    };
    record("fm velocity", fd_error(m.fm, fn, probes, rng, 1e-5));
  }
  {
    std::vector<flow::CfmExample<double>> batch;
    for (int i = 0; i < 6; ++i) {
      const auto sem = m.world.spec.semantics_of(i);
      batch.push_back({make_prompt(m.world, sem, i % kNumVariants), {rng.normal(), rng.normal()},
                       sample_target(m.world, sem, rng), rng.uniform()});
    }
    auto fn = [&](const flow::FlowModel<double>& model) {
      flow::ValueAndGrad<double> out{0.0, model.params().zeros_like()};
      out.value = flow::cfm_loss<double>(model, batch, &out.grads);
      return out;
    };
    record("cfm loss", fd_error(m.fm, fn, probes, rng, 1e-5));
  }
  const auto fm_ref = m.fm;
  const auto fm = detail::perturbed(m.fm, rng, 0.05);
  {
    RngStream roll(seed, 2);
    const auto traj = flow::sde_rollout(fm_ref, m.prompts[1], flow::NoiseSchedule{}, roll);
    record("trajectory log-prob",
           fd_error(fm, [&](const flow::FlowModel<double>& model) { return flow::traj_logprob_grad(model, traj); },
                    probes, rng, 1e-5));
    record("fm kl", fd_error(fm, [&](const flow::FlowModel<double>& model) { return flow::fm_kl(model, fm_ref, traj); },
                             probes, rng, 1e-5));
  }
  const auto lm_ref = m.lm;
  const auto lm = detail::perturbed(m.lm, rng, 0.1);
  {
    const Prompt p0 = m.prompts[2];
    const Prompt path = lm::identity_target(m.world.vocab, p0);
    record("lm sequence log-prob",
           fd_error(lm, [&](const lm::RefinerModel<double>& model) { return lm::seq_logprob_grad(model, p0, path); },
                    probes, rng, 1e-5));
    // Some KL coordinates are tiny; 1e-5 steps drown them in cancellation.
    record("lm kl",
           fd_error(lm, [&](const lm::RefinerModel<double>& model) { return lm::lm_kl(model, lm_ref, p0, path); },
                    probes, rng, 1e-4));
  }
  {
    auto st = grpo::TrainState<double>::start(fm_ref, lm_ref, seed);
    st.fm = fm;
    st.lm = lm;
    const auto c = detail::small_run();
    auto groups = detail::rollout_groups(m, st, c);
    detail::set_advantages(groups, 0.7, 1.3);
    auto lm_fn = [&](const lm::RefinerModel<double>& model) {
      auto probe = st;
      probe.lm = model;
      double value = 0.0;
      for (const auto& g : groups) {
        for (const auto& s : g.samples) {
          if (s.origin == grpo::Origin::Refined) {
            const auto t = lm::sequence_terms<double>(model, &st.lm_ref, g.p0, s.refine->raw_tokens, 0.0, 0.0, nullptr);
            value += -s.advantage * t.logp + c.group.beta_lm * t.kl;
          }
        }
      }
      return lm::ValueAndGrad<double>{value, grpo::lm_gradient(groups, probe, c)};
    };
    record("lm surrogate", fd_error(st.lm, lm_fn, probes, rng, 1e-4));
    auto fm_fn = [&](const flow::FlowModel<double>& model) {
      auto probe = st;
      probe.fm = model;
      double value = 0.0;
      for (const auto& g : groups) {
        for (const auto& s : g.samples) {
          const auto t = flow::trajectory_terms<double>(model, &st.fm_ref, s.trajectory, 0.0, 0.0, nullptr);
          value += -s.advantage * t.logp + c.group.beta_fm * t.kl;
        }
      }
      return flow::ValueAndGrad<double>{value, grpo::fm_gradient(groups, probe, c)};
    };
    record("fm surrogate", fd_error(st.fm, fm_fn, probes, rng, 1e-5));
  }
  return sec;
}

/// With zero noise the SDE sampler must reproduce plain Euler integration bit for bit.
inline Section sde_ode_reduction(std::uint64_t seed = 2, int pairs = 100) {
  Section sec{"sde-ode reduction", {}};
  const detail::Models m(seed);
  RngStream pick(seed, 1);
  const flow::NoiseSchedule schedule{20, 20, 0.0};
  int exact = 0;
  double worst = 0.0;
  for (int i = 0; i < pairs; ++i) {
    const auto sem = m.world.spec.semantics_of(static_cast<int>(pick.uniform_int(8)));
    Prompt p = make_prompt(m.world, sem, static_cast<int>(pick.uniform_int(3)), static_cast<int>(pick.uniform_int(3)));
    if (pick.bernoulli(0.5)) {
      p.insert(p.begin(), m.world.vocab.fillers()[pick.uniform_int(m.world.vocab.fillers().size())]);
    }
    RngStream rng(seed, 2, static_cast<std::uint64_t>(i));
    const auto traj = flow::sde_rollout(m.fm, p, schedule, rng);
    const auto cond = flow::condition(m.fm, p);
    Point<double> x = traj.states[0];
    bool same = traj.step_logps.empty();
    const double dt = schedule.dt();
    for (int k = 0; k < schedule.steps; ++k) {
      const auto v = flow::velocity_forward(m.fm, cond, x, schedule.time(k)).v;
      x = {x[0] + dt * v[0], x[1] + dt * v[1]};
      const auto& s = traj.states[static_cast<std::size_t>(k) + 1];
      worst = std::max({worst, std::abs(s[0] - x[0]), std::abs(s[1] - x[1])});
      same = same && s == x;
    }
    same = same && flow::ode_endpoint(m.fm, cond, traj.states[0], schedule.steps) == traj.endpoint();
    exact += same ? 1 : 0;
  }
  sec.add("zero-noise rollouts equal Euler", exact == pairs,
          std::to_string(exact) + "/" + std::to_string(pairs) + " exact, max deviation " + detail::fmt(worst));
  return sec;
}

/// Zero-sum, affine invariance and constant groups over random reward vectors.
inline Section advantage_algebra(std::uint64_t seed = 3, int groups = 1000) {
  Section sec{"advantage algebra", {}};
  RngStream rng(seed);
  int zero_sum = 0, affine = 0, order = 0, constant = 0;
  double worst_affine = 0.0;
  for (int gi = 0; gi < groups; ++gi) {
    const std::size_t n = 2 + rng.uniform_int(15);
    std::vector<double> r(n), t(n);
    const bool binary = rng.bernoulli(0.3);
    for (auto& v : r) {
      v = binary ? static_cast<double>(rng.uniform_int(3)) : 100.0 * rng.uniform();
    }
    if (std::all_of(r.begin(), r.end(), [&](double v) { return v == r[0]; })) {
      r[0] += 1.0;
    }
    // Scales outside [0.1, 10] let the rounding of a * R + b itself exceed
    // the tolerance before any normalization happens.
    const double a = std::exp(std::log(10.0) * (2.0 * rng.uniform() - 1.0));
    const double b = 10.0 * rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = a * r[i] + b;
    }

    const auto adv = grpo::normalized_advantages(r, 1e-6);
    double sum = 0.0;
    for (double v : adv) {
      sum += v;
    }
    zero_sum += sum == 0.0 ? 1 : 0;

    const auto a0 = grpo::normalized_advantages(r, 0.0);
    const auto t0 = grpo::normalized_advantages(t, 0.0);
    double dev = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dev = std::max(dev, std::abs(a0[i] - t0[i]));
    }
    worst_affine = std::max(worst_affine, dev);
    affine += dev <= kAffineTolerance ? 1 : 0;

    // Ties share an advantage up to rounding, so extremes are compared as
    // the set of reward-extremal positions.
    const auto te = grpo::normalized_advantages(t, 1e-6);
    const double rmax = *std::max_element(r.begin(), r.end());
    const double rmin = *std::min_element(r.begin(), r.end());
    const auto imax = static_cast<std::size_t>(std::max_element(te.begin(), te.end()) - te.begin());
    const auto imin = static_cast<std::size_t>(std::min_element(te.begin(), te.end()) - te.begin());
    const auto jmax = static_cast<std::size_t>(std::max_element(adv.begin(), adv.end()) - adv.begin());
    const auto jmin = static_cast<std::size_t>(std::min_element(adv.begin(), adv.end()) - adv.begin());
    order += (r[imax] == rmax && r[jmax] == rmax && r[imin] == rmin && r[jmin] == rmin) ? 1 : 0;

    const std::vector<double> flat(n, binary ? 2.0 : 100.0 * rng.uniform());
    const auto fa = grpo::normalized_advantages(flat, 1e-6);
    constant += detail::all_zero(fa) ? 1 : 0;
  }
  const auto frac = [&](int k) { return std::to_string(k) + "/" + std::to_string(groups); };
  sec.add("advantages sum to exactly zero", zero_sum == groups, frac(zero_sum));
  sec.add("affine reward invariance (eps = 0)", affine == groups,
          frac(affine) + ", max deviation " + detail::fmt(worst_affine));
  sec.add("argmax/argmin invariance (eps > 0)", order == groups, frac(order));
  sec.add("constant rewards give zero advantages", constant == groups, frac(constant));
  return sec;
}

/// Refiner learns only from refined samples; generator from all; no shared parameters.
inline Section selective_routing(std::uint64_t seed = 4) {
  Section sec{"selective routing", {}};
  const detail::Models m(seed);
  auto c = detail::small_run();
  c.group.beta_lm = 0.0;
  {
    auto full = c;
    full.group.m = full.group.n;
    auto st = grpo::TrainState<double>::start(m.fm, m.lm, seed);
    auto groups = detail::rollout_groups(m, st, full);
    detail::set_advantages(groups, 1.0, 1.0);
    const auto before = st.lm.params();
    const auto stats = grpo::lm_update(groups, st, full);
    const auto after = st.lm.params().values();
    sec.add("m = n leaves the refiner bit-unchanged",
            !stats.stepped && std::equal(after.begin(), after.end(), before.values().begin()));
  }
  {
    const auto st = grpo::TrainState<double>::start(m.fm, m.lm, seed);
    auto groups = detail::rollout_groups(m, st, c);
    detail::set_advantages(groups, 1.0, 0.0);
    const auto g_lm = grpo::lm_gradient(groups, st, c);
    const auto g_fm = grpo::fm_gradient(groups, st, c);
    sec.add("zero refined advantages give a zero refiner gradient", detail::all_zero(g_lm.values()));
    sec.add("original samples alone move the generator", !detail::all_zero(g_fm.values()));
    std::set<std::string> names;
    for (const auto& s : g_lm.segments()) {
      names.insert(s.name);
    }
    bool disjoint = g_lm.same_layout(st.lm.params()) && g_fm.same_layout(st.fm.params());
    for (const auto& s : g_fm.segments()) {
      disjoint = disjoint && names.count(s.name) == 0;
    }
    sec.add("refiner and generator gradients share no parameters", disjoint);
  }
  return sec;
}

/// The enumerated accept/reject vectors for the answer parser.
inline Section format_parser() {
  Section sec{"format parser", {}};
  const World w;
  struct Vector {
    const char* name;
    std::vector<std::string> tokens;
    std::optional<std::vector<std::string>> inner;
  };
  const std::vector<Vector> vectors{
      {"well-formed", {"<answer>", "red", "ring", "</answer>", "<eos>"}, {{"red", "ring"}}},
      {"missing open", {"red", "ring", "</answer>", "<eos>"}, std::nullopt},
      {"missing close", {"<answer>", "red", "ring", "<eos>"}, std::nullopt},
      {"trailing tokens", {"<answer>", "red", "ring", "</answer>", "red", "<eos>"}, std::nullopt},
      {"empty answer", {"<answer>", "</answer>", "<eos>"}, std::nullopt},
      {"nested tags", {"<answer>", "red", "<answer>", "ring", "</answer>", "</answer>", "<eos>"}, std::nullopt},
      {"tags only", {"<answer>", "</answer>", "<answer>", "</answer>", "<eos>"}, std::nullopt},
      {"no eos at length cap", {"<answer>", "red", "ring", "</answer>"}, {{"red", "ring"}}},
      {"eos inside answer", {"<answer>", "red", "<eos>", "ring", "</answer>"}, std::nullopt},
      {"filler-only answer", {"<answer>", "the", "</answer>", "<eos>"}, std::nullopt},
  };
  for (const auto& v : vectors) {
    const auto got = parse_answer(w.vocab, w.vocab.encode(v.tokens));
    const bool ok = v.inner ? (got.has_value() && *got == w.vocab.encode(*v.inner)) : !got.has_value();
    sec.add(v.name, ok, got ? "accepted " + w.vocab.to_text(*got) : "rejected");
  }
  return sec;
}

inline Report run_all() {
  return Report{{gradients(), sde_ode_reduction(), advantage_algebra(), selective_routing(), format_parser()}};
}

}  // namespace promptrl::selftest
