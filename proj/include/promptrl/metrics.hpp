// SPDX-License-Identifier: Apache-2.0
//
// Evaluation: endpoint dispersion, original-vs-paraphrase reward gap with and
// without the refiner in the loop, rollouts-to-threshold on training logs,
// and a two-sample energy-distance permutation test.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "promptrl/error.hpp"
#include "promptrl/flowfm.hpp"
#include "promptrl/grpo.hpp"
#include "promptrl/lmpolicy.hpp"
#include "promptrl/rewards.hpp"
#include "promptrl/rng.hpp"
#include "promptrl/toyworld.hpp"

namespace promptrl::metrics {

/// Mean pairwise Euclidean distance.
template <typename Real>
double dispersion(std::span<const Point<Real>> points) {
  require(points.size() >= 2, ErrorCode::TooFewPoints, "dispersion needs at least two points");
  double sum = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      sum += std::hypot(static_cast<double>(points[i][0] - points[j][0]),
                        static_cast<double>(points[i][1] - points[j][1]));
    }
  }
  const double pairs = 0.5 * static_cast<double>(points.size()) * static_cast<double>(points.size() - 1);
  return sum / pairs;
}

struct EvalOptions {
  int samples_per_prompt = 64;
  int steps = 20;
  std::uint64_t seed = 0;
  double lm_temperature = 1.0;  ///< 0 decodes greedily
  RewardTag tag = RewardTag::Goal;
  GenRewardParams gen{};
};

struct EvalRow {
  std::string split;  ///< "original" or "paraphrase"
  std::string prompt;
  double mean_reward = 0.0;
  double dispersion = 0.0;
  double format_rate = 1.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_original = 0.0;
  double mean_paraphrase = 0.0;
  double paraphrase_gap = 0.0;
  std::optional<double> format_rate;  ///< only with the refiner in the loop

  double mean_all() const {
    double s = 0.0;
    for (const auto& r : rows) {
      s += r.mean_reward;
    }
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
  }

  void recompute_aggregates(bool with_lm) {
    double so = 0.0, sp = 0.0, sf = 0.0;
    int no = 0, np = 0;
    for (const auto& r : rows) {
      if (r.split == "original") {
        so += r.mean_reward;
        ++no;
      } else {
        sp += r.mean_reward;
        ++np;
      }
      sf += r.format_rate;
    }
    mean_original = no > 0 ? so / no : 0.0;
    mean_paraphrase = np > 0 ? sp / np : 0.0;
    paraphrase_gap = mean_original - mean_paraphrase;
    format_rate = with_lm && !rows.empty() ? std::optional<double>(sf / static_cast<double>(rows.size())) : std::nullopt;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["mean_original"] = mean_original;
    j["mean_paraphrase"] = mean_paraphrase;
    j["paraphrase_gap"] = paraphrase_gap;
    j["format_rate"] = format_rate ? nlohmann::ordered_json(*format_rate) : nlohmann::ordered_json();
    auto rows_j = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      rows_j.push_back({{"split", r.split},
                        {"prompt", r.prompt},
                        {"mean_reward", r.mean_reward},
                        {"dispersion", r.dispersion},
                        {"format_rate", r.format_rate}});
    }
    j["rows"] = rows_j;
    return j;
  }
};

inline constexpr std::uint64_t kEvalStream = 0xE7A1ull;

/// ODE evaluation. Sample j of every prompt with the same meaning starts from
/// the same x_0, so original and paraphrase rows are paired and runs with and
/// without the refiner differ only through the prompt used.
template <typename Real>
EvalReport eval_suite(const World& world, const flow::FlowModel<Real>& fm, const lm::RefinerModel<Real>* lm,
                      const Splits& splits, const EvalOptions& options) {
  require(options.samples_per_prompt >= 2, ErrorCode::InvalidArgument, "need at least two samples per prompt");
  EvalReport report;
  auto run_split = [&](const std::vector<Prompt>& prompts, const std::string& split, std::uint64_t split_id) {
    for (std::size_t p = 0; p < prompts.size(); ++p) {
      const Prompt& p0 = prompts[p];
      const Semantics sem = canonicalize(world, p0);
      std::vector<Point<Real>> endpoints;
      endpoints.reserve(static_cast<std::size_t>(options.samples_per_prompt));
      double reward = 0.0;
      int format_ok = 0;
      const auto base_cond = flow::condition(fm, p0);
      const auto component = static_cast<std::uint64_t>(world.spec.component_index(sem));
      for (int j = 0; j < options.samples_per_prompt; ++j) {
        const auto ju = static_cast<std::uint64_t>(j);
        RngStream noise = RngStream(options.seed, kEvalStream, component, ju).substream(grpo::kRolloutStream);
        const Point<Real> x0{static_cast<Real>(noise.normal()), static_cast<Real>(noise.normal())};
        Point<Real> x{};
        bool used_refined = false;
        if (lm != nullptr) {
          RngStream refine_rng = RngStream(options.seed, kEvalStream ^ split_id, p, ju).substream(grpo::kRefineStream);
          const auto out = lm::refine_sample(*lm, world.vocab, p0, refine_rng, options.lm_temperature);
          if (out.format_ok) {
            ++format_ok;
            x = flow::ode_endpoint(fm, flow::condition(fm, *out.parsed), x0, options.steps);
            used_refined = true;
          }
        }
        if (!used_refined) {
          x = flow::ode_endpoint(fm, base_cond, x0, options.steps);
        }
        reward += gen_reward(world, options.tag, x, sem, options.gen);
        endpoints.push_back(x);
      }
      EvalRow row;
      row.split = split;
      row.prompt = world.vocab.to_text(p0);
      row.mean_reward = reward / options.samples_per_prompt;
      row.dispersion = dispersion<Real>(endpoints);
      row.format_rate = lm != nullptr ? static_cast<double>(format_ok) / options.samples_per_prompt : 1.0;
      report.rows.push_back(std::move(row));
    }
  };
  run_split(splits.eval_original, "original", 1);
  run_split(splits.eval_paraphrase, "paraphrase", 2);
  report.recompute_aggregates(lm != nullptr);
  return report;
}

/// The co-trained refiner in front of a generator it was not trained with.
template <typename Real>
EvalReport transfer_eval(const World& world, const lm::RefinerModel<Real>& lm, const flow::FlowModel<Real>& foreign_fm,
                         const Splits& splits, const EvalOptions& options) {
  return eval_suite(world, foreign_fm, &lm, splits, options);
}

/// Reward series for a tag; when `tag` is empty and the log holds several
/// tags, the tag_mix-weighted mean is used.
inline std::vector<double> reward_series(const std::vector<grpo::IterationRecord>& log,
                                         const std::optional<std::string>& tag = std::nullopt) {
  std::vector<double> out;
  out.reserve(log.size());
  for (const auto& rec : log) {
    if (tag) {
      auto it = rec.mean_reward_per_tag.find(*tag);
      require(it != rec.mean_reward_per_tag.end(), ErrorCode::MalformedLog,
              "iteration " + std::to_string(rec.iter) + " has no reward for tag " + *tag);
      out.push_back(it->second);
      continue;
    }
    require(!rec.mean_reward_per_tag.empty(), ErrorCode::MalformedLog,
            "iteration " + std::to_string(rec.iter) + " has no rewards");
    double num = 0.0, den = 0.0;
    for (const auto& [key, value] : rec.mean_reward_per_tag) {
      auto mix = rec.tag_mix.find(key);
      const double w = mix == rec.tag_mix.end() ? 1.0 : mix->second;
      num += w * value;
      den += w;
    }
    out.push_back(num / den);
  }
  return out;
}

/// Trailing mean over up to `window` records ending at each index.
inline std::vector<double> trailing_mean(std::span<const double> values, int window = 5) {
  std::vector<double> out(values.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= static_cast<std::size_t>(window)) {
      acc -= values[i - static_cast<std::size_t>(window)];
    }
    const auto count = std::min<std::size_t>(i + 1, static_cast<std::size_t>(window));
    out[i] = acc / static_cast<double>(count);
  }
  return out;
}

/// First cumulative rollout count at which the 5-iteration trailing mean
/// reward reaches `threshold`.
inline std::optional<std::int64_t> rollouts_to_threshold(const std::vector<grpo::IterationRecord>& log,
                                                         double threshold,
                                                         const std::optional<std::string>& tag = std::nullopt,
                                                         int window = 5) {
  const auto series = reward_series(log, tag);
  const auto trail = trailing_mean(series, window);
  for (std::size_t i = 0; i < trail.size(); ++i) {
    if (trail[i] >= threshold) {
      return log[i].rollouts;
    }
  }
  return std::nullopt;
}

inline std::vector<grpo::IterationRecord> parse_log(const std::string& jsonl) {
  std::vector<grpo::IterationRecord> log;
  std::size_t start = 0;
  int line_no = 0;
  while (start < jsonl.size()) {
    auto end = jsonl.find('\n', start);
    if (end == std::string::npos) {
      end = jsonl.size();
    }
    ++line_no;
    const std::string line = jsonl.substr(start, end - start);
    start = end + 1;
    if (line.empty()) {
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedLog, "line " + std::to_string(line_no) + ": " + e.what());
    }
    log.push_back(grpo::IterationRecord::from_json(j));
  }
  return log;
}

// --- two-sample energy distance ---------------------------------------------------------

/// Sum of pairwise distances split by label: within-0, within-1, across.
struct PairSums {
  double within_a = 0.0;
  double within_b = 0.0;
  double across = 0.0;
};

inline double energy_from_sums(const PairSums& s, std::size_t na, std::size_t nb) {
  const double a = static_cast<double>(na);
  const double b = static_cast<double>(nb);
  return 2.0 * s.across / (a * b) - 2.0 * s.within_a / (a * a) - 2.0 * s.within_b / (b * b);
}

/// Energy distance E = 2 E|X-Y| - E|X-X'| - E|Y-Y'| (V-statistic).
template <typename Real>
double energy_distance(std::span<const Point<Real>> xs, std::span<const Point<Real>> ys) {
  PairSums s;
  auto d = [](const Point<Real>& p, const Point<Real>& q) {
    return std::hypot(static_cast<double>(p[0] - q[0]), static_cast<double>(p[1] - q[1]));
  };
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t j = i + 1; j < xs.size(); ++j) {
      s.within_a += d(xs[i], xs[j]);
    }
    for (const auto& y : ys) {
      s.across += d(xs[i], y);
    }
  }
  for (std::size_t i = 0; i < ys.size(); ++i) {
    for (std::size_t j = i + 1; j < ys.size(); ++j) {
      s.within_b += d(ys[i], ys[j]);
    }
  }
  return energy_from_sums(s, xs.size(), ys.size());
}

struct PermutationTest {
  double statistic = 0.0;
  double p_value = 1.0;
  double null_quantile_99 = 0.0;
  std::vector<double> null_distribution;
};

/// Permutation test of equal distributions; the pooled distance matrix is
/// computed once (float storage, upper triangle).
template <typename Real>
PermutationTest energy_permutation_test(std::span<const Point<Real>> xs, std::span<const Point<Real>> ys,
                                        int permutations, RngStream& rng) {
  require(xs.size() >= 2 && ys.size() >= 2, ErrorCode::TooFewPoints, "energy test needs two points per sample");
  std::vector<Point<Real>> pooled(xs.begin(), xs.end());
  pooled.insert(pooled.end(), ys.begin(), ys.end());
  const std::size_t N = pooled.size();
  std::vector<float> dist;
  dist.reserve(N * (N - 1) / 2);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t j = i + 1; j < N; ++j) {
      dist.push_back(static_cast<float>(std::hypot(static_cast<double>(pooled[i][0] - pooled[j][0]),
                                                   static_cast<double>(pooled[i][1] - pooled[j][1]))));
    }
  }
  auto statistic = [&](const std::vector<unsigned char>& label) {
    PairSums s;
    std::size_t k = 0;
    for (std::size_t i = 0; i < N; ++i) {
      double wa = 0.0, wb = 0.0, ac = 0.0;
      const unsigned char li = label[i];
      for (std::size_t j = i + 1; j < N; ++j, ++k) {
        const double dv = dist[k];
        const unsigned char lj = label[j];
        if (li != lj) {
          ac += dv;
        } else if (li == 0) {
          wa += dv;
        } else {
          wb += dv;
        }
      }
      s.within_a += wa;
      s.within_b += wb;
      s.across += ac;
    }
    return energy_from_sums(s, xs.size(), ys.size());
  };
  std::vector<unsigned char> label(N, 0);
  for (std::size_t i = xs.size(); i < N; ++i) {
    label[i] = 1;
  }
  PermutationTest out;
  out.statistic = statistic(label);
  int at_least = 0;
  for (int p = 0; p < permutations; ++p) {
    for (std::size_t i = N - 1; i > 0; --i) {
      std::swap(label[i], label[rng.uniform_int(i + 1)]);
    }
    const double s = statistic(label);
    out.null_distribution.push_back(s);
    at_least += s >= out.statistic ? 1 : 0;
  }
  out.p_value = (1.0 + at_least) / (1.0 + permutations);
  auto sorted = out.null_distribution;
  std::sort(sorted.begin(), sorted.end());
  if (!sorted.empty()) {
    const auto idx = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(sorted.size()))) - 1;
    out.null_quantile_99 = sorted[std::min(idx, sorted.size() - 1)];
  }
  return out;
}

}  // namespace promptrl::metrics
