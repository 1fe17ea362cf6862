// SPDX-License-Identifier: Apache-2.0
//
// Joint group-relative policy optimization of the refiner and the generator.
//
// Each original prompt p0 spawns a group of n samples: the first m keep p0,
// the rest condition the generator on a refiner rewrite. Rewards are z-scored
// within the group. The refiner learns only from rewritten samples; the
// generator learns from all of them. The two parameter vectors never share
// gradients.
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "promptrl/error.hpp"
#include "promptrl/flowfm.hpp"
#include "promptrl/lmpolicy.hpp"
#include "promptrl/nn.hpp"
#include "promptrl/rewards.hpp"
#include "promptrl/rng.hpp"
#include "promptrl/toyworld.hpp"

namespace promptrl::grpo {

inline constexpr int kLogVersion = 1;

enum class Origin { Original, Refined };
enum class TagMode { Single, Multi };
enum class TrainMode { PromptRL, FlowOnly };

inline std::string to_string(TrainMode mode) { return mode == TrainMode::PromptRL ? "promptrl" : "flow-only"; }

struct GroupConfig {
  int n = 8;
  int m = 2;
  int batch = 8;  ///< groups (original prompts) per iteration
  double eps_stab = 1e-6;
  double beta_fm = 1e-3;
  double beta_lm = 1e-2;
  double lr_fm = 1e-3;
  double lr_lm = 1e-3;
  int k_epochs = 1;

  void validate() const {
    require(n >= 2, ErrorCode::InvalidArgument, "group size n must be >= 2");
    require(m >= 0 && m <= n, ErrorCode::InvalidArgument, "0 <= m <= n");
    require(batch >= 1, ErrorCode::InvalidArgument, "batch must be >= 1");
    require(eps_stab > 0.0, ErrorCode::InvalidArgument, "eps_stab must be > 0");
    require(beta_fm >= 0.0 && beta_lm >= 0.0, ErrorCode::InvalidArgument, "KL coefficients must be >= 0");
    require(lr_fm >= 0.0 && lr_lm >= 0.0, ErrorCode::InvalidArgument, "learning rates must be >= 0");
    require(k_epochs == 1, ErrorCode::InvalidArgument, "only a single update per batch is supported");
  }
};

struct RunConfig {
  GroupConfig group;
  flow::NoiseSchedule schedule;
  double temperature = 1.0;
  RewardWeights weights;
  GenRewardParams gen;
  TagMode tag_mode = TagMode::Single;
  RewardTag tag = RewardTag::Goal;
  RewardTarget reward_target = RewardTarget::Original;
  TrainMode mode = TrainMode::PromptRL;
  int iterations = 500;
  std::uint64_t seed = 0;
  int workers = 1;
  bool record_wall_time = false;  ///< off in sequential mode so logs are byte-stable
  nn::AdamWConfig adam{};

  /// Retained original-prompt samples actually used (all of them when flow-only).
  int retained() const { return mode == TrainMode::FlowOnly ? group.n : group.m; }
};

template <typename Real>
struct GroupSample {
  int index = 1;  ///< 1-based position in the group
  Origin origin = Origin::Original;
  Prompt prompt_used;
  std::optional<lm::RefineOutput<Real>> refine;
  flow::Trajectory<Real> trajectory;
  RewardResult reward;
  double advantage = 0.0;
};

template <typename Real>
struct RolloutGroup {
  Prompt p0;
  Semantics semantics;
  RewardTag tag = RewardTag::Goal;
  std::vector<GroupSample<Real>> samples;
  double mu = 0.0;
  double sigma = 0.0;
};

template <typename Real>
struct TrainState {
  flow::FlowModel<Real> fm;
  flow::FlowModel<Real> fm_ref;
  lm::RefinerModel<Real> lm;
  lm::RefinerModel<Real> lm_ref;
  nn::AdamW<Real> fm_opt;
  nn::AdamW<Real> lm_opt;
  std::int64_t iteration = 0;
  std::int64_t rollouts = 0;
  std::uint64_t root_seed = 0;

  /// References are frozen copies of the starting policies.
  static TrainState start(flow::FlowModel<Real> fm, lm::RefinerModel<Real> lm, std::uint64_t seed,
                          const nn::AdamWConfig& adam = {}) {
    TrainState s;
    s.fm_ref = fm;
    s.lm_ref = lm;
    s.fm_opt = nn::AdamW<Real>(fm.params().size(), adam);
    s.lm_opt = nn::AdamW<Real>(lm.params().size(), adam);
    s.fm = std::move(fm);
    s.lm = std::move(lm);
    s.root_seed = seed;
    return s;
  }
};

/// Stream for sample i of group g at iteration `iter`.
inline RngStream sample_stream(std::uint64_t seed, std::int64_t iter, int group, int sample) {
  return RngStream(seed, static_cast<std::uint64_t>(iter), static_cast<std::uint64_t>(group),
                   static_cast<std::uint64_t>(sample));
}

inline constexpr std::uint64_t kRefineStream = 1;
inline constexpr std::uint64_t kRolloutStream = 2;

template <typename Real>
RolloutGroup<Real> build_group(const World& world, const Prompt& p0, RewardTag tag, const TrainState<Real>& state,
                               const RunConfig& config, std::int64_t iter, int group_idx) {
  RolloutGroup<Real> group;
  group.p0 = p0;
  group.semantics = canonicalize(world, p0);
  group.tag = tag;
  const int n = config.group.n;
  const int retained = config.retained();
  group.samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    GroupSample<Real> s;
    s.index = i + 1;
    const RngStream stream = sample_stream(state.root_seed, iter, group_idx, i);
    s.prompt_used = p0;
    if (i >= retained) {
      s.origin = Origin::Refined;
      RngStream refine_rng = stream.substream(kRefineStream);
      s.refine = lm::refine_sample(state.lm, world.vocab, p0, refine_rng, config.temperature);
      if (s.refine->format_ok) {
        s.prompt_used = *s.refine->parsed;
      }
    }
    RngStream rollout_rng = stream.substream(kRolloutStream);
    try {
      s.trajectory = flow::sde_rollout(state.fm, s.prompt_used, config.schedule, rollout_rng);
    } catch (const NonFiniteStateError& e) {
      throw Error(ErrorCode::GroupAborted, "sample " + std::to_string(s.index) + ": " + e.what());
    }
    SampleView<Real> view;
    view.refined = s.origin == Origin::Refined;
    view.format_ok = !view.refined || s.refine->format_ok;
    view.refined_prompt = view.refined && s.refine->format_ok ? &*s.refine->parsed : nullptr;
    view.endpoint = s.trajectory.endpoint();
    view.tag = tag;
    s.reward = evaluate_sample(world, view, group.semantics, config.weights, config.reward_target, config.gen);
    group.samples.push_back(std::move(s));
  }
  return group;
}

/// Population mean and standard deviation of the group's rewards.
template <typename Real>
std::pair<double, double> reward_stats(const RolloutGroup<Real>& group) {
  const double n = static_cast<double>(group.samples.size());
  double mu = 0.0;
  for (const auto& s : group.samples) {
    mu += s.reward.total;
  }
  mu /= n;
  double var = 0.0;
  for (const auto& s : group.samples) {
    var += (s.reward.total - mu) * (s.reward.total - mu);
  }
  return {mu, std::sqrt(var / n)};
}

/// A_i = (R_i - mu) / (sigma + eps). The last advantage is set to minus the
/// running sum of the others so that the left-to-right sum is exactly zero.
inline std::vector<double> normalized_advantages(std::span<const double> rewards, double eps) {
  const std::size_t n = rewards.size();
  require(n >= 1, ErrorCode::InvalidArgument, "no rewards to normalize");
  std::vector<double> adv(n, 0.0);
  // The mean of equal values can be off by an ulp, which eps would amplify.
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) {
    return adv;
  }
  double mu = 0.0;
  for (double r : rewards) {
    mu += r;
  }
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (double r : rewards) {
    var += (r - mu) * (r - mu);
  }
  const double sigma = std::sqrt(var / static_cast<double>(n));
  const double denom = sigma + eps;
  if (denom == 0.0) {
    return adv;
  }
  double running = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    adv[i] = (rewards[i] - mu) / denom;
    running += adv[i];
  }
  adv[n - 1] = -running;
  return adv;
}

template <typename Real>
void normalize_advantages(RolloutGroup<Real>& group, double eps_stab) {
  std::vector<double> rewards;
  rewards.reserve(group.samples.size());
  for (const auto& s : group.samples) {
    rewards.push_back(s.reward.total);
  }
  const auto adv = normalized_advantages(rewards, eps_stab);
  for (std::size_t i = 0; i < adv.size(); ++i) {
    group.samples[i].advantage = adv[i];
  }
  std::tie(group.mu, group.sigma) = reward_stats(group);
}

struct UpdateStats {
  bool stepped = false;
  bool non_finite = false;
  int samples = 0;
  double mean_abs_advantage = 0.0;
  double mean_kl = 0.0;
};

/// Calls fn(index) for index in [0, count) on `workers` threads.
inline void parallel_for(int count, int workers, const std::function<void(int)>& fn) {
  if (workers <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) {
      fn(i);
    }
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  const int threads = std::min(workers, count);
  pool.reserve(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        fn(i);
      }
    });
  }
  for (auto& t : pool) {
    t.join();
  }
}

namespace detail {

template <typename Real>
struct SampleRef {
  const RolloutGroup<Real>* group;
  const GroupSample<Real>* sample;
};

/// Per-sample gradients computed independently, then summed in sample order,
/// so the result is independent of the worker count.
template <typename Real, typename Fn>
nn::ParamVector<Real> summed_gradient(const nn::ParamVector<Real>& layout, const std::vector<SampleRef<Real>>& refs,
                                      int workers, std::vector<double>& kl_out, Fn&& per_sample) {
  std::vector<nn::ParamVector<Real>> parts(refs.size());
  kl_out.assign(refs.size(), 0.0);
  parallel_for(static_cast<int>(refs.size()), workers, [&](int i) {
    const auto iu = static_cast<std::size_t>(i);
    parts[iu] = layout.zeros_like();
    kl_out[iu] = per_sample(refs[iu], parts[iu]);
  });
  auto total = layout.zeros_like();
  for (const auto& p : parts) {
    total += p;
  }
  return total;
}

}  // namespace detail

/// Refiner gradient of  -sum_{refined} A_i log pi(p_i | p0) + beta_lm * sum KL.
template <typename Real>
nn::ParamVector<Real> lm_gradient(const std::vector<RolloutGroup<Real>>& groups, const TrainState<Real>& state,
                                  const RunConfig& config, UpdateStats* stats = nullptr) {
  std::vector<detail::SampleRef<Real>> refs;
  double abs_adv = 0.0;
  for (const auto& g : groups) {
    for (const auto& s : g.samples) {
      if (s.origin == Origin::Refined) {
        refs.push_back({&g, &s});
        abs_adv += std::abs(s.advantage);
      }
    }
  }
  std::vector<double> kls;
  const auto beta = static_cast<Real>(config.group.beta_lm);
  auto grads = detail::summed_gradient<Real>(
      state.lm.params(), refs, config.workers, kls, [&](const detail::SampleRef<Real>& r, nn::ParamVector<Real>& g) {
        const auto terms = lm::sequence_terms<Real>(state.lm, &state.lm_ref, r.group->p0, r.sample->refine->raw_tokens,
                                                    static_cast<Real>(-r.sample->advantage), beta, &g);
        return static_cast<double>(terms.kl);
      });
  if (stats != nullptr) {
    stats->samples = static_cast<int>(refs.size());
    double kl = 0.0;
    for (double k : kls) {
      kl += k;
    }
    stats->mean_kl = refs.empty() ? 0.0 : kl / static_cast<double>(refs.size());
    stats->mean_abs_advantage = refs.empty() ? 0.0 : abs_adv / static_cast<double>(refs.size());
  }
  return grads;
}

/// Generator gradient of  -sum_{all} A_i log pi(x_i | p_i) + beta_fm * sum KL.
template <typename Real>
nn::ParamVector<Real> fm_gradient(const std::vector<RolloutGroup<Real>>& groups, const TrainState<Real>& state,
                                  const RunConfig& config, UpdateStats* stats = nullptr) {
  std::vector<detail::SampleRef<Real>> refs;
  double abs_adv = 0.0;
  for (const auto& g : groups) {
    for (const auto& s : g.samples) {
      refs.push_back({&g, &s});
      abs_adv += std::abs(s.advantage);
    }
  }
  std::vector<double> kls;
  const auto beta = static_cast<Real>(config.group.beta_fm);
  auto grads = detail::summed_gradient<Real>(
      state.fm.params(), refs, config.workers, kls, [&](const detail::SampleRef<Real>& r, nn::ParamVector<Real>& g) {
        const auto terms = flow::trajectory_terms<Real>(state.fm, &state.fm_ref, r.sample->trajectory,
                                                        static_cast<Real>(-r.sample->advantage), beta, &g);
        return static_cast<double>(terms.kl);
      });
  if (stats != nullptr) {
    stats->samples = static_cast<int>(refs.size());
    double kl = 0.0;
    for (double k : kls) {
      kl += k;
    }
    stats->mean_kl = refs.empty() ? 0.0 : kl / static_cast<double>(refs.size());
    stats->mean_abs_advantage = refs.empty() ? 0.0 : abs_adv / static_cast<double>(refs.size());
  }
  return grads;
}

/// One AdamW step on the refiner; skipped when no refined samples exist or
/// the gradient is not finite.
template <typename Real>
UpdateStats lm_update(const std::vector<RolloutGroup<Real>>& groups, TrainState<Real>& state, const RunConfig& config) {
  UpdateStats stats;
  auto grads = lm_gradient(groups, state, config, &stats);
  if (stats.samples == 0) {
    return stats;
  }
  if (!grads.all_finite()) {
    stats.non_finite = true;
    return stats;
  }
  state.lm_opt.step(state.lm.params().values(), grads.values(), config.group.lr_lm);
  stats.stepped = true;
  return stats;
}

template <typename Real>
UpdateStats fm_update(const std::vector<RolloutGroup<Real>>& groups, TrainState<Real>& state, const RunConfig& config) {
  UpdateStats stats;
  auto grads = fm_gradient(groups, state, config, &stats);
  if (stats.samples == 0) {
    return stats;
  }
  if (!grads.all_finite()) {
    stats.non_finite = true;
    return stats;
  }
  state.fm_opt.step(state.fm.params().values(), grads.values(), config.group.lr_fm);
  stats.stepped = true;
  return stats;
}

// --- training loop ---------------------------------------------------------------------

inline constexpr std::uint64_t kBatchStream = 0xB47C4ull;

/// Indices of the B training prompts for an iteration: without replacement
/// when B <= |D|, otherwise with replacement.
inline std::vector<std::size_t> select_prompts(std::size_t pool, int batch, std::uint64_t seed, std::int64_t iter) {
  RngStream rng(seed, kBatchStream, static_cast<std::uint64_t>(iter));
  std::vector<std::size_t> out;
  if (static_cast<std::size_t>(batch) <= pool) {
    std::vector<std::size_t> idx(pool);
    for (std::size_t i = 0; i < pool; ++i) {
      idx[i] = i;
    }
    for (std::size_t i = 0; i < static_cast<std::size_t>(batch); ++i) {
      const std::size_t j = i + rng.uniform_int(pool - i);
      std::swap(idx[i], idx[j]);
      out.push_back(idx[i]);
    }
  } else {
    for (int i = 0; i < batch; ++i) {
      out.push_back(rng.uniform_int(pool));
    }
  }
  return out;
}

/// Round-robin over {GOAL, PREF} per prompt draw in multi-reward mode.
inline RewardTag tag_for_draw(const RunConfig& config, std::int64_t iter, int draw) {
  if (config.tag_mode == TagMode::Single) {
    return config.tag;
  }
  return ((iter * config.group.batch + draw) % 2 == 0) ? RewardTag::Goal : RewardTag::Pref;
}

struct IterationRecord {
  std::int64_t iter = 0;
  std::int64_t rollouts = 0;
  std::string mode;
  std::map<std::string, int> tag_mix;
  std::map<std::string, double> mean_reward_per_tag;
  std::optional<double> mean_format_rate;
  double mean_abs_advantage = 0.0;
  double fm_kl = 0.0;
  double lm_kl = 0.0;
  int dropped_groups = 0;
  std::int64_t wall_ms = 0;
  std::uint64_t seed = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["log_version"] = kLogVersion;
    j["iter"] = iter;
    j["rollouts"] = rollouts;
    j["mode"] = mode;
    j["tag_mix"] = tag_mix;
    j["mean_reward_per_tag"] = mean_reward_per_tag;
    j["mean_format_rate"] = mean_format_rate ? nlohmann::ordered_json(*mean_format_rate) : nlohmann::ordered_json();
    j["mean_abs_advantage"] = mean_abs_advantage;
    j["fm_kl"] = fm_kl;
    j["lm_kl"] = lm_kl;
    j["dropped_groups"] = dropped_groups;
    j["wall_ms"] = wall_ms;
    j["seed"] = seed;
    return j;
  }

  static IterationRecord from_json(const nlohmann::json& j) {
    IterationRecord r;
    try {
      r.iter = j.at("iter").get<std::int64_t>();
      r.rollouts = j.at("rollouts").get<std::int64_t>();
      r.mode = j.at("mode").get<std::string>();
      r.tag_mix = j.at("tag_mix").get<std::map<std::string, int>>();
      r.mean_reward_per_tag = j.at("mean_reward_per_tag").get<std::map<std::string, double>>();
      if (!j.at("mean_format_rate").is_null()) {
        r.mean_format_rate = j.at("mean_format_rate").get<double>();
      }
      r.mean_abs_advantage = j.at("mean_abs_advantage").get<double>();
      r.fm_kl = j.at("fm_kl").get<double>();
      r.lm_kl = j.at("lm_kl").get<double>();
      r.dropped_groups = j.at("dropped_groups").get<int>();
      r.wall_ms = j.at("wall_ms").get<std::int64_t>();
      r.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedLog, e.what());
    }
    return r;
  }
};

/// Everything that happened in one iteration; groups are kept for inspection.
template <typename Real>
struct IterationResult {
  IterationRecord record;
  std::vector<RolloutGroup<Real>> groups;
  UpdateStats lm;
  UpdateStats fm;
};

template <typename Real>
IterationResult<Real> train_iteration(const World& world, const std::vector<Prompt>& train_prompts,
                                      TrainState<Real>& state, const RunConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  const std::int64_t iter = state.iteration;
  const int B = config.group.batch;
  const auto picks = select_prompts(train_prompts.size(), B, state.root_seed, iter);

  std::vector<std::optional<RolloutGroup<Real>>> built(static_cast<std::size_t>(B));
  parallel_for(B, config.workers, [&](int g) {
    const auto gu = static_cast<std::size_t>(g);
    try {
      built[gu] = build_group(world, train_prompts[picks[gu]], tag_for_draw(config, iter, g), state, config, iter, g);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::GroupAborted) {
        throw;
      }
    }
  });

  IterationResult<Real> result;
  auto& rec = result.record;
  for (auto& g : built) {
    if (!g) {
      ++rec.dropped_groups;
      continue;
    }
    normalize_advantages(*g, config.group.eps_stab);
    result.groups.push_back(std::move(*g));
  }

  if (config.mode == TrainMode::PromptRL) {
    result.lm = lm_update(result.groups, state, config);
  }
  result.fm = fm_update(result.groups, state, config);

  state.iteration += 1;
  state.rollouts += static_cast<std::int64_t>(B) * config.group.n;

  rec.iter = state.iteration;
  rec.rollouts = state.rollouts;
  rec.mode = to_string(config.mode);
  rec.seed = state.root_seed;
  std::map<std::string, double> reward_sum;
  std::map<std::string, int> reward_count;
  int refined = 0;
  int refined_ok = 0;
  for (int g = 0; g < B; ++g) {
    rec.tag_mix[to_string(tag_for_draw(config, iter, g))] += 1;
  }
  for (const auto& g : result.groups) {
    const auto key = to_string(g.tag);
    for (const auto& s : g.samples) {
      reward_sum[key] += s.reward.total;
      reward_count[key] += 1;
      if (s.origin == Origin::Refined) {
        ++refined;
        refined_ok += s.refine->format_ok ? 1 : 0;
      }
    }
  }
  for (const auto& [key, sum] : reward_sum) {
    rec.mean_reward_per_tag[key] = sum / reward_count[key];
  }
  if (refined > 0) {
    rec.mean_format_rate = static_cast<double>(refined_ok) / refined;
  }
  rec.mean_abs_advantage = result.fm.mean_abs_advantage;
  rec.fm_kl = result.fm.mean_kl;
  rec.lm_kl = result.lm.mean_kl;
  if (config.record_wall_time) {
    rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started)
                      .count();
  }
  return result;
}

/// Runs config.iterations iterations; `on_record` sees every log record.
template <typename Real>
std::vector<IterationRecord> train(const World& world, const std::vector<Prompt>& train_prompts,
                                   TrainState<Real>& state, const RunConfig& config,
                                   const std::function<void(const IterationRecord&, const TrainState<Real>&)>&
                                       on_record = {}) {
  config.group.validate();
  config.schedule.validate();
  require(!train_prompts.empty(), ErrorCode::InvalidArgument, "no training prompts");
  std::vector<IterationRecord> log;
  log.reserve(static_cast<std::size_t>(config.iterations));
  for (int i = 0; i < config.iterations; ++i) {
    auto result = train_iteration(world, train_prompts, state, config);
    if (on_record) {
      on_record(result.record, state);
    }
    log.push_back(std::move(result.record));
  }
  return log;
}

template <typename Real>
std::vector<IterationRecord> train_promptrl(const World& world, const std::vector<Prompt>& train_prompts,
                                            TrainState<Real>& state, RunConfig config) {
  config.mode = TrainMode::PromptRL;
  return train(world, train_prompts, state, config);
}

template <typename Real>
std::vector<IterationRecord> train_flow_only(const World& world, const std::vector<Prompt>& train_prompts,
                                             TrainState<Real>& state, RunConfig config) {
  config.mode = TrainMode::FlowOnly;
  return train(world, train_prompts, state, config);
}

}  // namespace promptrl::grpo
