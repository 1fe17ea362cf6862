// SPDX-License-Identifier: Apache-2.0
//
// Autoregressive prompt refiner.
//
// The state for the next token is the pair (mean-pooled original prompt,
// mean-pooled BOS + prefix); each is projected to 32 units with tanh, and the
// concatenation feeds a one-hidden-layer tanh MLP producing vocabulary logits.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "promptrl/error.hpp"
#include "promptrl/nn.hpp"
#include "promptrl/rewards.hpp"
#include "promptrl/rng.hpp"
#include "promptrl/toyworld.hpp"

namespace promptrl::lm {

/// The prefix pool always starts with this token id (Vocab::bos()).
inline constexpr TokenId kBosId = 0;

struct LmSpec {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t proj_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t max_len = 12;

  nn::MlpSpec proj() const { return {embed_dim, {}, proj_dim}; }
  nn::MlpSpec head() const { return {2 * proj_dim, {hidden_dim}, vocab_size}; }

  nlohmann::ordered_json to_json() const {
    return {{"kind", "lm"},           {"vocab_size", vocab_size}, {"embed_dim", embed_dim},
            {"proj_dim", proj_dim},   {"hidden_dim", hidden_dim}, {"max_len", max_len}};
  }
  static LmSpec from_json(const nlohmann::ordered_json& j) {
    require(j.at("kind").get<std::string>() == "lm", ErrorCode::Io, "checkpoint is not a refiner model");
    return {j.at("vocab_size").get<std::size_t>(), j.at("embed_dim").get<std::size_t>(),
            j.at("proj_dim").get<std::size_t>(), j.at("hidden_dim").get<std::size_t>(),
            j.at("max_len").get<std::size_t>()};
  }
  friend bool operator==(const LmSpec&, const LmSpec&) = default;
};

template <typename Real>
class RefinerModel {
 public:
  RefinerModel() = default;

  explicit RefinerModel(LmSpec spec) : spec_(spec) {
    require(spec_.vocab_size >= 1 && spec_.max_len >= 1, ErrorCode::InvalidArgument, "refiner dims");
    embed_ = params_.add_segment("lm.embed", spec_.vocab_size, spec_.embed_dim);
    proj_c_ = nn::add_mlp_segments(params_, "lm.proj_c", spec_.proj());
    proj_h_ = nn::add_mlp_segments(params_, "lm.proj_h", spec_.proj());
    head_ = nn::add_mlp_segments(params_, "lm.head", spec_.head());
  }

  RefinerModel(LmSpec spec, nn::ParamVector<Real> params) : RefinerModel(spec) {
    require(params.same_layout(params_), ErrorCode::DimensionMismatch, "refiner parameter layout");
    params_ = std::move(params);
  }

  static RefinerModel random(const LmSpec& spec, RngStream& rng) {
    RefinerModel model(spec);
    for (auto& v : model.params_.view(model.embed_)) {
      v = static_cast<Real>(rng.normal());
    }
    nn::init_mlp(model.proj_c(model.params_), spec.proj(), rng);
    nn::init_mlp(model.proj_h(model.params_), spec.proj(), rng);
    nn::init_mlp(model.head(model.params_), spec.head(), rng, 0.1);
    return model;
  }

  const LmSpec& spec() const { return spec_; }
  nn::ParamVector<Real>& params() { return params_; }
  const nn::ParamVector<Real>& params() const { return params_; }

  template <typename P>
  auto embed(P& p) const { return p.view(embed_); }
  template <typename P>
  auto proj_c(P& p) const { return p.range(proj_c_, 2); }
  template <typename P>
  auto proj_h(P& p) const { return p.range(proj_h_, 2); }
  template <typename P>
  auto head(P& p) const { return p.range(head_, 2 * spec_.head().num_layers()); }

 private:
  LmSpec spec_;
  nn::ParamVector<Real> params_;
  std::size_t embed_ = 0;
  std::size_t proj_c_ = 0;
  std::size_t proj_h_ = 0;
  std::size_t head_ = 0;
};

namespace detail {

template <typename Real>
struct Projected {
  nn::EmbedCache pool;
  nn::MlpCache<Real> proj;
  std::vector<Real> u;  ///< tanh(projection)
};

template <typename Real>
Projected<Real> project(const RefinerModel<Real>& lm, std::span<const TokenId> tokens, bool context) {
  const auto& params = lm.params();
  auto pooled = nn::embed_pool<Real>(lm.embed(params), lm.spec().vocab_size, lm.spec().embed_dim, tokens);
  auto proj = nn::mlp_apply<Real>(context ? lm.proj_c(params) : lm.proj_h(params), lm.spec().proj(), pooled.output);
  for (auto& v : proj.output) {
    v = std::tanh(v);
  }
  return {std::move(pooled.cache), std::move(proj.cache), std::move(proj.output)};
}

template <typename Real>
void project_backward(const RefinerModel<Real>& lm, const Projected<Real>& p, std::vector<Real> du, bool context,
                      nn::ParamVector<Real>& grads) {
  for (std::size_t i = 0; i < du.size(); ++i) {
    du[i] *= Real(1) - p.u[i] * p.u[i];
  }
  const auto& params = lm.params();
  auto dpool = nn::mlp_grad<Real>(context ? lm.proj_c(params) : lm.proj_h(params), lm.spec().proj(), p.proj, du,
                                  context ? lm.proj_c(grads) : lm.proj_h(grads));
  nn::embed_pool_grad<Real>(p.pool, lm.spec().embed_dim, dpool, lm.embed(grads));
}

template <typename Real>
struct StepEval {
  Projected<Real> prefix;
  nn::MlpCache<Real> head;
  std::vector<Real> logits;
};

template <typename Real>
StepEval<Real> step_forward(const RefinerModel<Real>& lm, const Projected<Real>& ctx, std::span<const TokenId> prefix) {
  std::vector<TokenId> with_bos;
  with_bos.reserve(prefix.size() + 1);
  with_bos.push_back(kBosId);
  with_bos.insert(with_bos.end(), prefix.begin(), prefix.end());
  StepEval<Real> step;
  step.prefix = project(lm, std::span<const TokenId>(with_bos), false);
  std::vector<Real> u(ctx.u);
  u.insert(u.end(), step.prefix.u.begin(), step.prefix.u.end());
  auto out = nn::mlp_apply<Real>(lm.head(lm.params()), lm.spec().head(), u);
  step.head = std::move(out.cache);
  step.logits = std::move(out.output);
  return step;
}

/// Returns d/d(u_context); prefix-side gradients are pushed all the way down.
template <typename Real>
std::vector<Real> step_backward(const RefinerModel<Real>& lm, const StepEval<Real>& step, std::span<const Real> dlogits,
                                nn::ParamVector<Real>& grads) {
  auto du = nn::mlp_grad<Real>(lm.head(lm.params()), lm.spec().head(), step.head, dlogits, lm.head(grads));
  const std::size_t p = lm.spec().proj_dim;
  std::vector<Real> du_ctx(du.begin(), du.begin() + static_cast<std::ptrdiff_t>(p));
  std::vector<Real> du_pre(du.begin() + static_cast<std::ptrdiff_t>(p), du.end());
  project_backward(lm, step.prefix, std::move(du_pre), false, grads);
  return du_ctx;
}

template <typename Real>
std::vector<Real> log_softmax(std::span<const Real> logits, Real temperature = Real(1)) {
  Real mx = -std::numeric_limits<Real>::infinity();
  for (Real l : logits) {
    mx = std::max(mx, l / temperature);
  }
  Real sum = 0;
  for (Real l : logits) {
    sum += std::exp(l / temperature - mx);
  }
  const Real lse = mx + std::log(sum);
  std::vector<Real> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] / temperature - lse;
  }
  return out;
}

template <typename Real>
void check_ids(const LmSpec& spec, std::span<const TokenId> tokens) {
  for (TokenId t : tokens) {
    require(t >= 0 && static_cast<std::size_t>(t) < spec.vocab_size, ErrorCode::IdOutOfRange,
            "token id " + std::to_string(t));
  }
}

}  // namespace detail

template <typename Real>
std::vector<Real> next_token_dist(const RefinerModel<Real>& lm, const Prompt& p0, const Prompt& prefix) {
  const auto ctx = detail::project(lm, std::span<const TokenId>(p0), true);
  const auto step = detail::step_forward(lm, ctx, prefix);
  auto lp = detail::log_softmax<Real>(step.logits);
  for (auto& v : lp) {
    v = std::exp(v);
  }
  return lp;
}

template <typename Real>
struct RefineOutput {
  Prompt raw_tokens;
  std::vector<Real> token_logps;
  std::optional<Prompt> parsed;
  bool format_ok = false;
};

/// Ancestral sampling until EOS or max_len tokens. temperature == 0 decodes
/// greedily (each recorded log-probability is then 0).
template <typename Real>
RefineOutput<Real> refine_sample(const RefinerModel<Real>& lm, const Vocab& vocab, const Prompt& p0, RngStream& rng,
                                 double temperature = 1.0) {
  require(!p0.empty(), ErrorCode::EmptySequence, "refiner needs a non-empty prompt");
  require(temperature >= 0.0, ErrorCode::InvalidArgument, "temperature must be >= 0");
  detail::check_ids<Real>(lm.spec(), p0);
  const auto ctx = detail::project(lm, std::span<const TokenId>(p0), true);
  RefineOutput<Real> out;
  while (out.raw_tokens.size() < lm.spec().max_len) {
    const auto step = detail::step_forward(lm, ctx, out.raw_tokens);
    TokenId next = 0;
    Real logp = 0;
    if (temperature == 0.0) {
      next = static_cast<TokenId>(std::max_element(step.logits.begin(), step.logits.end()) - step.logits.begin());
    } else {
      const auto lp = detail::log_softmax<Real>(step.logits, static_cast<Real>(temperature));
      std::vector<Real> probs(lp.size());
      for (std::size_t i = 0; i < lp.size(); ++i) {
        probs[i] = std::exp(lp[i]);
      }
      next = static_cast<TokenId>(rng.categorical<Real>(probs));
      logp = lp[static_cast<std::size_t>(next)];
    }
    out.raw_tokens.push_back(next);
    out.token_logps.push_back(logp);
    if (next == vocab.eos()) {
      break;
    }
  }
  out.parsed = parse_answer(vocab, out.raw_tokens);
  out.format_ok = out.parsed.has_value();
  return out;
}

template <typename Real>
struct SequenceTerms {
  Real logp = 0;
  Real kl = 0;
};

/// logp = sum_t log pi(token_t | p0, tokens_<t); kl = sum_t KL(pi || pi_ref)
/// over the same states. Gradients of (logp_weight * logp + kl_weight * kl)
/// are accumulated into `grads` when non-null.
template <typename Real>
SequenceTerms<Real> sequence_terms(const RefinerModel<Real>& lm, const RefinerModel<Real>* ref, const Prompt& p0,
                                   const Prompt& tokens, Real logp_weight, Real kl_weight,
                                   nn::ParamVector<Real>* grads) {
  require(!p0.empty(), ErrorCode::EmptySequence, "refiner needs a non-empty prompt");
  require(!tokens.empty() && tokens.size() <= lm.spec().max_len, ErrorCode::InvalidArgument,
          "sequence length must be in [1, max_len]");
  detail::check_ids<Real>(lm.spec(), p0);
  detail::check_ids<Real>(lm.spec(), tokens);
  if (ref != nullptr) {
    require(ref->spec() == lm.spec(), ErrorCode::DimensionMismatch, "reference refiner layout");
  }
  SequenceTerms<Real> out;
  const auto ctx = detail::project(lm, std::span<const TokenId>(p0), true);
  std::optional<detail::Projected<Real>> ref_ctx;
  if (ref != nullptr) {
    ref_ctx = detail::project(*ref, std::span<const TokenId>(p0), true);
  }
  std::vector<Real> du_ctx(lm.spec().proj_dim, Real(0));
  const std::size_t V = lm.spec().vocab_size;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const std::span<const TokenId> prefix(tokens.data(), t);
    const auto step = detail::step_forward(lm, ctx, prefix);
    const auto lp = detail::log_softmax<Real>(step.logits);
    const auto target = static_cast<std::size_t>(tokens[t]);
    out.logp += lp[target];
    std::vector<Real> dlogits(V, Real(0));
    for (std::size_t j = 0; j < V; ++j) {
      dlogits[j] = -logp_weight * std::exp(lp[j]);
    }
    dlogits[target] += logp_weight;
    if (ref != nullptr) {
      const auto ref_step = detail::step_forward(*ref, *ref_ctx, prefix);
      const auto lq = detail::log_softmax<Real>(ref_step.logits);
      Real kl_t = 0;
      for (std::size_t j = 0; j < V; ++j) {
        kl_t += std::exp(lp[j]) * (lp[j] - lq[j]);
      }
      out.kl += kl_t;
      for (std::size_t j = 0; j < V; ++j) {
        dlogits[j] += kl_weight * std::exp(lp[j]) * (lp[j] - lq[j] - kl_t);
      }
    }
    if (grads != nullptr) {
      const auto du = detail::step_backward(lm, step, std::span<const Real>(dlogits), *grads);
      for (std::size_t i = 0; i < du.size(); ++i) {
        du_ctx[i] += du[i];
      }
    }
  }
  if (grads != nullptr) {
    detail::project_backward(lm, ctx, std::move(du_ctx), true, *grads);
  }
  return out;
}

template <typename Real>
struct ValueAndGrad {
  Real value = 0;
  nn::ParamVector<Real> grads;
};

template <typename Real>
ValueAndGrad<Real> seq_logprob_grad(const RefinerModel<Real>& lm, const Prompt& p0, const Prompt& tokens) {
  ValueAndGrad<Real> out{Real(0), lm.params().zeros_like()};
  out.value = sequence_terms<Real>(lm, nullptr, p0, tokens, Real(1), Real(0), &out.grads).logp;
  return out;
}

template <typename Real>
ValueAndGrad<Real> lm_kl(const RefinerModel<Real>& lm, const RefinerModel<Real>& ref, const Prompt& p0,
                         const Prompt& tokens) {
  ValueAndGrad<Real> out{Real(0), lm.params().zeros_like()};
  out.value = sequence_terms<Real>(lm, &ref, p0, tokens, Real(0), Real(1), &out.grads).kl;
  return out;
}

// --- supervised identity initialization ----------------------------------------------

/// ANSWER_OPEN + p0 + ANSWER_CLOSE + EOS
inline Prompt identity_target(const Vocab& vocab, const Prompt& p0) {
  Prompt target{vocab.answer_open()};
  target.insert(target.end(), p0.begin(), p0.end());
  target.push_back(vocab.answer_close());
  target.push_back(vocab.eos());
  return target;
}

struct SftPair {
  Prompt p0;
  Prompt target;
};

struct SftOptions {
  int max_steps = 5000;
  double lr = 1e-2;
  nn::AdamWConfig adam{};
  int check_every = 25;
  /// Stop once greedy decoding matches every target and the mean per-token
  /// NLL is at most this value.
  double target_nll = 0.05;
};

struct SftReport {
  int steps = 0;
  bool converged = false;
  double mean_token_nll = 0.0;
  int exact_matches = 0;
};

template <typename Real>
int greedy_exact_matches(const RefinerModel<Real>& lm, const Vocab& vocab, const std::vector<SftPair>& pairs) {
  RngStream unused;
  int matches = 0;
  for (const auto& pair : pairs) {
    matches += refine_sample(lm, vocab, pair.p0, unused, 0.0).raw_tokens == pair.target ? 1 : 0;
  }
  return matches;
}

template <typename Real>
SftReport sft_init(RefinerModel<Real>& lm, const Vocab& vocab, const std::vector<SftPair>& pairs,
                   const SftOptions& options) {
  require(!pairs.empty(), ErrorCode::InvalidArgument, "no SFT pairs");
  std::size_t total_tokens = 0;
  for (const auto& p : pairs) {
    total_tokens += p.target.size();
  }
  nn::AdamW<Real> opt(lm.params().size(), options.adam);
  SftReport report;
  const Real w = Real(1) / static_cast<Real>(total_tokens);
  for (int step = 0; step <= options.max_steps; ++step) {
    auto grads = lm.params().zeros_like();
    Real logp = 0;
    for (const auto& p : pairs) {
      // Descending the NLL: weight -1 on logp.
      logp += sequence_terms<Real>(lm, nullptr, p.p0, p.target, -w, Real(0), &grads).logp;
    }
    report.mean_token_nll = -static_cast<double>(logp) / static_cast<double>(total_tokens);
    require(std::isfinite(report.mean_token_nll), ErrorCode::NonFiniteLoss, "SFT loss");
    report.steps = step;
    if (step % options.check_every == 0 || step == options.max_steps) {
      if (report.mean_token_nll <= options.target_nll) {
        report.exact_matches = greedy_exact_matches(lm, vocab, pairs);
        if (report.exact_matches == static_cast<int>(pairs.size())) {
          report.converged = true;
          return report;
        }
      }
    }
    if (step == options.max_steps) {
      break;
    }
    opt.step(lm.params().values(), grads.values(), options.lr);
  }
  report.exact_matches = greedy_exact_matches(lm, vocab, pairs);
  return report;
}

}  // namespace promptrl::lm
