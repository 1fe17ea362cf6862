// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "promptrl/error.hpp"
#include "promptrl/toyworld.hpp"

namespace promptrl {

enum class RewardTag { Goal, Pref };

inline std::string to_string(RewardTag tag) { return tag == RewardTag::Goal ? "GOAL" : "PREF"; }

inline RewardTag parse_tag(const std::string& s) {
  if (s == "GOAL") {
    return RewardTag::Goal;
  }
  if (s == "PREF") {
    return RewardTag::Pref;
  }
  throw Error(ErrorCode::InvalidArgument, "reward tag must be GOAL or PREF, got '" + s + "'");
}

struct RewardWeights {
  double format = 1.0;
  double gen = 1.0;
};

/// Shape of the two generation rewards.
struct GenRewardParams {
  double goal_radius = 0.45;
  double pref_scale = 100.0;
  double pref_width = 0.6;
};

struct RewardResult {
  double r_format = 0.0;
  double r_gen = 0.0;
  RewardTag tag = RewardTag::Goal;
  double total = 0.0;
};

/// Accepts exactly ANSWER_OPEN, one or more inner tokens, ANSWER_CLOSE and an
/// optional trailing EOS. Inner tokens may not be structural and must include
/// at least one non-filler token.
inline std::optional<Prompt> parse_answer(const Vocab& vocab, const Prompt& raw) {
  std::size_t end = raw.size();
  if (end > 0 && raw[end - 1] == vocab.eos()) {
    --end;
  }
  if (end < 3 || raw[0] != vocab.answer_open() || raw[end - 1] != vocab.answer_close()) {
    return std::nullopt;
  }
  Prompt inner(raw.begin() + 1, raw.begin() + static_cast<std::ptrdiff_t>(end - 1));
  bool has_content = false;
  for (TokenId t : inner) {
    if (vocab.is_structural(t)) {
      return std::nullopt;
    }
    has_content = has_content || !vocab.is_filler(t);
  }
  if (!has_content) {
    return std::nullopt;
  }
  return inner;
}

template <typename Real>
double gen_reward(const World& world, RewardTag tag, const Point<Real>& x, const Semantics& sem,
                  const GenRewardParams& params = {}) {
  const auto mean = world.spec.mean(world.spec.component_index(sem));
  const double dx = static_cast<double>(x[0]) - mean[0];
  const double dy = static_cast<double>(x[1]) - mean[1];
  const double d2 = dx * dx + dy * dy;
  if (tag == RewardTag::Goal) {
    return std::sqrt(d2) <= params.goal_radius ? 1.0 : 0.0;
  }
  return params.pref_scale * std::exp(-d2 / (2.0 * params.pref_width * params.pref_width));
}

inline double composite(double r_format, double r_gen, const RewardWeights& w) {
  return w.format * r_format + w.gen * r_gen;
}

/// Maximum composite reward for a tag (format satisfied, endpoint on target).
inline double max_composite(RewardTag tag, const RewardWeights& w, const GenRewardParams& params = {}) {
  return composite(1.0, tag == RewardTag::Goal ? 1.0 : params.pref_scale, w);
}

enum class RewardTarget { Original, Refined };

/// What a reward needs to know about one generated sample.
template <typename Real>
struct SampleView {
  bool refined = false;  ///< false for retained original-prompt samples
  bool format_ok = true;
  const Prompt* refined_prompt = nullptr;  ///< parsed LM answer, when present
  Point<Real> endpoint{};
  RewardTag tag = RewardTag::Goal;
};

template <typename Real>
RewardResult evaluate_sample(const World& world, const SampleView<Real>& sample, const Semantics& p0_semantics,
                             const RewardWeights& weights, RewardTarget target = RewardTarget::Original,
                             const GenRewardParams& params = {}) {
  RewardResult r;
  r.tag = sample.tag;
  r.r_format = (!sample.refined || sample.format_ok) ? 1.0 : 0.0;
  Semantics judged = p0_semantics;
  if (target == RewardTarget::Refined && sample.refined && sample.refined_prompt != nullptr) {
    if (auto s = try_canonicalize(world, *sample.refined_prompt)) {
      judged = *s;
    }
  }
  r.r_gen = gen_reward(world, sample.tag, sample.endpoint, judged, params);
  r.total = composite(r.r_format, r.r_gen, weights);
  return r;
}

}  // namespace promptrl
