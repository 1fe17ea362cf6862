// SPDX-License-Identifier: Apache-2.0
//
// Conditional flow-matching generator on R^2.
//
// Time runs from t = 0 (standard normal noise) to t = 1 (data) along the
// linear path x_t = t * x1 + (1 - t) * x0, so the marginal score follows from
// the velocity as (t * v - x) / (1 - t). Rollouts integrate
//
//   x_{k+1} = x_k + dt * (v + sigma_k^2 / 2 * score) + sigma_k * sqrt(dt) * z
//
// with sigma_k = a on the first `sde_steps` steps and 0 afterwards; with
// a = 0 this is plain Euler integration of the ODE.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "promptrl/error.hpp"
#include "promptrl/nn.hpp"
#include "promptrl/rng.hpp"
#include "promptrl/toyworld.hpp"

namespace promptrl::flow {

struct FmSpec {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 8;
  std::vector<std::size_t> hidden{64, 64};

  nn::MlpSpec mlp() const { return {2 + 1 + embed_dim, hidden, 2}; }

  nlohmann::ordered_json to_json() const {
    return {{"kind", "flow"}, {"vocab_size", vocab_size}, {"embed_dim", embed_dim}, {"hidden", hidden}};
  }
  static FmSpec from_json(const nlohmann::ordered_json& j) {
    require(j.at("kind").get<std::string>() == "flow", ErrorCode::Io, "checkpoint is not a flow model");
    return {j.at("vocab_size").get<std::size_t>(), j.at("embed_dim").get<std::size_t>(),
            j.at("hidden").get<std::vector<std::size_t>>()};
  }
  friend bool operator==(const FmSpec&, const FmSpec&) = default;
};

/// Velocity field v(x, t, prompt) = MLP(x, t, mean-pooled prompt embedding).
template <typename Real>
class FlowModel {
 public:
  FlowModel() = default;

  explicit FlowModel(FmSpec spec) : spec_(std::move(spec)) {
    require(spec_.vocab_size >= 1 && spec_.embed_dim >= 1, ErrorCode::InvalidArgument, "flow model dims");
    embed_seg_ = params_.add_segment("fm.embed", spec_.vocab_size, spec_.embed_dim);
    mlp_first_ = nn::add_mlp_segments(params_, "fm.velocity", spec_.mlp());
  }

  FlowModel(FmSpec spec, nn::ParamVector<Real> params) : FlowModel(std::move(spec)) {
    require(params.same_layout(params_), ErrorCode::DimensionMismatch, "flow parameter layout");
    params_ = std::move(params);
  }

  static FlowModel random(const FmSpec& spec, RngStream& rng, double output_scale = 0.1) {
    FlowModel model(spec);
    for (auto& v : model.params_.view(model.embed_seg_)) {
      v = static_cast<Real>(rng.normal());
    }
    nn::init_mlp(model.mlp_params_mut(), model.mlp_spec(), rng, output_scale);
    return model;
  }

  const FmSpec& spec() const { return spec_; }
  nn::MlpSpec mlp_spec() const { return spec_.mlp(); }
  nn::ParamVector<Real>& params() { return params_; }
  const nn::ParamVector<Real>& params() const { return params_; }

  std::size_t embed_segment() const { return embed_seg_; }
  std::size_t num_mlp_segments() const { return 2 * mlp_spec().num_layers(); }
  std::span<const Real> embed_table() const { return params_.view(embed_seg_); }
  std::span<const Real> mlp_params() const { return params_.range(mlp_first_, num_mlp_segments()); }
  std::span<Real> mlp_params_mut() { return params_.range(mlp_first_, num_mlp_segments()); }

  /// Views into a gradient vector with this model's layout.
  std::span<Real> embed_grad(nn::ParamVector<Real>& g) const { return g.view(embed_seg_); }
  std::span<Real> mlp_grad(nn::ParamVector<Real>& g) const { return g.range(mlp_first_, num_mlp_segments()); }

 private:
  FmSpec spec_;
  nn::ParamVector<Real> params_;
  std::size_t embed_seg_ = 0;
  std::size_t mlp_first_ = 0;
};

/// Pooled prompt embedding, computed once per rollout.
template <typename Real>
struct Conditioning {
  std::vector<Real> embedding;
  nn::EmbedCache cache;
};

template <typename Real>
Conditioning<Real> condition(const FlowModel<Real>& model, std::span<const TokenId> prompt) {
  auto pooled = nn::embed_pool<Real>(model.embed_table(), model.spec().vocab_size, model.spec().embed_dim, prompt);
  return {std::move(pooled.output), std::move(pooled.cache)};
}

template <typename Real>
struct VelocityEval {
  Point<Real> v{};
  nn::MlpCache<Real> cache;
};

template <typename Real>
VelocityEval<Real> velocity_forward(const FlowModel<Real>& model, const Conditioning<Real>& cond,
                                    const Point<Real>& x, Real t) {
  std::vector<Real> input;
  input.reserve(3 + cond.embedding.size());
  input.push_back(x[0]);
  input.push_back(x[1]);
  input.push_back(t);
  input.insert(input.end(), cond.embedding.begin(), cond.embedding.end());
  auto out = nn::mlp_apply<Real>(model.mlp_params(), model.mlp_spec(), input);
  return {{out.output[0], out.output[1]}, std::move(out.cache)};
}

/// Accumulates MLP gradients for <dv, v> and returns d/d(conditioning).
template <typename Real>
std::vector<Real> velocity_backward(const FlowModel<Real>& model, const VelocityEval<Real>& eval,
                                    const Point<Real>& dv, nn::ParamVector<Real>& grads) {
  const std::array<Real, 2> up{dv[0], dv[1]};
  auto dinput = nn::mlp_grad<Real>(model.mlp_params(), model.mlp_spec(), eval.cache, up, model.mlp_grad(grads));
  return {dinput.begin() + 3, dinput.end()};
}

template <typename Real>
void conditioning_backward(const FlowModel<Real>& model, const Conditioning<Real>& cond,
                           std::span<const Real> dcond, nn::ParamVector<Real>& grads) {
  nn::embed_pool_grad<Real>(cond.cache, model.spec().embed_dim, dcond, model.embed_grad(grads));
}

template <typename Real>
Point<Real> velocity(const FlowModel<Real>& model, const Point<Real>& x, Real t, std::span<const TokenId> prompt) {
  require(t < Real(1), ErrorCode::TSingular, "velocity is evaluated on t in [0, 1)");
  return velocity_forward(model, condition(model, prompt), x, t).v;
}

template <typename Real>
Point<Real> score_from_velocity(const Point<Real>& x, Real t, const Point<Real>& v) {
  require(t < Real(1), ErrorCode::TSingular, "score is singular at t = 1");
  const Real inv = Real(1) / (Real(1) - t);
  return {(t * v[0] - x[0]) * inv, (t * v[1] - x[1]) * inv};
}

struct NoiseSchedule {
  int steps = 20;
  int sde_steps = 20;
  double noise = 0.25;

  void validate() const {
    require(steps >= 1, ErrorCode::InvalidArgument, "schedule needs at least one step");
    require(sde_steps >= 0 && sde_steps <= steps, ErrorCode::InvalidArgument, "0 <= sde_steps <= steps");
    require(noise >= 0.0 && std::isfinite(noise), ErrorCode::InvalidArgument, "noise scale must be >= 0");
  }
  /// Steps that actually inject noise; none when a = 0.
  int stochastic_steps() const { return noise > 0.0 ? sde_steps : 0; }
  bool is_stochastic(int k) const { return k < stochastic_steps(); }
  double dt() const { return 1.0 / steps; }
  double time(int k) const { return static_cast<double>(k) / steps; }

  static NoiseSchedule ode(int steps) { return {steps, 0, 0.0}; }
  friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;
};

template <typename Real>
struct Trajectory {
  Prompt prompt;
  NoiseSchedule schedule;
  std::vector<Point<Real>> states;  ///< x_0 .. x_T
  std::vector<Point<Real>> means;   ///< mu_0 .. mu_{T-1}
  std::vector<Real> sigmas;         ///< sigma_k in {a, 0}
  std::vector<Real> step_logps;     ///< one per stochastic step
  std::uint64_t stream_id = 0;

  const Point<Real>& endpoint() const { return states.back(); }
  Real logp() const {
    Real s = 0;
    for (Real v : step_logps) {
      s += v;
    }
    return s;
  }
};

namespace detail {

/// mu = x + dt * (v + sigma^2 / 2 * score); its derivative w.r.t. v is the
/// scalar dt * (1 + sigma^2 t / (2 (1 - t))).
template <typename Real>
Point<Real> step_mean(const Point<Real>& x, Real t, const Point<Real>& v, Real sigma, Real dt) {
  const Point<Real> score = score_from_velocity(x, t, v);
  const Real c = sigma * sigma / Real(2);
  return {x[0] + dt * (v[0] + c * score[0]), x[1] + dt * (v[1] + c * score[1])};
}

template <typename Real>
Real mean_velocity_jacobian(Real t, Real sigma, Real dt) {
  return dt * (Real(1) + sigma * sigma * t / (Real(2) * (Real(1) - t)));
}

template <typename Real>
Real gaussian_logpdf(const Point<Real>& x, const Point<Real>& mu, Real var) {
  const Real dx = x[0] - mu[0];
  const Real dy = x[1] - mu[1];
  return -(dx * dx + dy * dy) / (Real(2) * var) - std::log(Real(2) * std::numbers::pi_v<Real> * var);
}

template <typename Real>
bool finite(const Point<Real>& p) {
  return std::isfinite(p[0]) && std::isfinite(p[1]);
}

}  // namespace detail

/// Full stochastic rollout; x_0 and every noise draw come from `rng`.
template <typename Real>
Trajectory<Real> sde_rollout(const FlowModel<Real>& model, const Prompt& prompt, const NoiseSchedule& schedule,
                             RngStream& rng) {
  schedule.validate();
  const auto cond = condition(model, prompt);
  const Real dt = static_cast<Real>(schedule.dt());
  const Real sqrt_dt = std::sqrt(dt);
  Trajectory<Real> traj;
  traj.prompt = prompt;
  traj.schedule = schedule;
  traj.stream_id = rng.id();
  traj.states.reserve(static_cast<std::size_t>(schedule.steps) + 1);
  traj.states.push_back({static_cast<Real>(rng.normal()), static_cast<Real>(rng.normal())});
  for (int k = 0; k < schedule.steps; ++k) {
    const Point<Real> x = traj.states.back();
    const Real t = static_cast<Real>(schedule.time(k));
    const bool stochastic = schedule.is_stochastic(k);
    const Real sigma = stochastic ? static_cast<Real>(schedule.noise) : Real(0);
    const Point<Real> v = velocity_forward(model, cond, x, t).v;
    const Point<Real> mu = detail::step_mean(x, t, v, sigma, dt);
    Point<Real> next = mu;
    if (stochastic) {
      const Real z0 = static_cast<Real>(rng.normal());
      const Real z1 = static_cast<Real>(rng.normal());
      next = {mu[0] + sigma * sqrt_dt * z0, mu[1] + sigma * sqrt_dt * z1};
      traj.step_logps.push_back(detail::gaussian_logpdf(next, mu, sigma * sigma * dt));
    }
    if (!detail::finite(next)) {
      throw NonFiniteStateError(k, "rollout state became non-finite at step " + std::to_string(k));
    }
    traj.means.push_back(mu);
    traj.sigmas.push_back(sigma);
    traj.states.push_back(next);
  }
  return traj;
}

/// Deterministic endpoint from a given x_0 (Euler, no trajectory storage).
template <typename Real>
Point<Real> ode_endpoint(const FlowModel<Real>& model, const Conditioning<Real>& cond, Point<Real> x, int steps) {
  const Real dt = Real(1) / static_cast<Real>(steps);
  for (int k = 0; k < steps; ++k) {
    const Real t = static_cast<Real>(k) / static_cast<Real>(steps);
    const Point<Real> v = velocity_forward(model, cond, x, t).v;
    x = detail::step_mean(x, t, v, Real(0), dt);
  }
  return x;
}

namespace detail {

inline void check_trajectory(const auto& traj) {
  const auto T = static_cast<std::size_t>(traj.schedule.steps);
  require(traj.states.size() == T + 1 && traj.means.size() == T && traj.sigmas.size() == T &&
              traj.step_logps.size() == static_cast<std::size_t>(traj.schedule.stochastic_steps()),
          ErrorCode::ScheduleMismatch, "trajectory does not match its schedule");
}

}  // namespace detail

/// Per-sample policy-gradient surrogate pieces, evaluated at the current
/// parameters with the stored states held fixed:
///   logp = sum_k log N(x_{k+1}; mu_k(theta), sigma^2 dt I)
///   kl   = sum_k |mu_k(theta) - mu_k(ref)|^2 / (2 sigma^2 dt)
/// Gradients of (logp_weight * logp + kl_weight * kl) are accumulated into
/// `grads` when non-null. `ref` may be null when kl_weight is unused.
template <typename Real>
struct SurrogateTerms {
  Real logp = 0;
  Real kl = 0;
};

template <typename Real>
SurrogateTerms<Real> trajectory_terms(const FlowModel<Real>& model, const FlowModel<Real>* ref,
                                      const Trajectory<Real>& traj, Real logp_weight, Real kl_weight,
                                      nn::ParamVector<Real>* grads) {
  detail::check_trajectory(traj);
  if (ref != nullptr) {
    require(ref->spec() == model.spec(), ErrorCode::ScheduleMismatch, "reference model has a different layout");
  }
  if (grads != nullptr) {
    require(grads->same_layout(model.params()), ErrorCode::LengthMismatch, "gradient layout");
  }
  SurrogateTerms<Real> out;
  const int stochastic = traj.schedule.stochastic_steps();
  if (stochastic == 0) {
    return out;
  }
  const Real dt = static_cast<Real>(traj.schedule.dt());
  const auto cond = condition(model, traj.prompt);
  std::optional<Conditioning<Real>> ref_cond;
  if (ref != nullptr) {
    ref_cond = condition(*ref, traj.prompt);
  }
  std::vector<Real> dcond(model.spec().embed_dim, Real(0));
  for (int k = 0; k < stochastic; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    const Point<Real>& x = traj.states[ku];
    const Point<Real>& next = traj.states[ku + 1];
    const Real t = static_cast<Real>(traj.schedule.time(k));
    const Real sigma = traj.sigmas[ku];
    const Real var = sigma * sigma * dt;
    auto eval = velocity_forward(model, cond, x, t);
    const Point<Real> mu = detail::step_mean(x, t, eval.v, sigma, dt);
    out.logp += detail::gaussian_logpdf(next, mu, var);
    Point<Real> dmu{logp_weight * (next[0] - mu[0]) / var, logp_weight * (next[1] - mu[1]) / var};
    if (ref != nullptr) {
      const Point<Real> v_ref = velocity_forward(*ref, *ref_cond, x, t).v;
      const Point<Real> mu_ref = detail::step_mean(x, t, v_ref, sigma, dt);
      const Real d0 = mu[0] - mu_ref[0];
      const Real d1 = mu[1] - mu_ref[1];
      out.kl += (d0 * d0 + d1 * d1) / (Real(2) * var);
      dmu[0] += kl_weight * d0 / var;
      dmu[1] += kl_weight * d1 / var;
    }
    if (grads != nullptr) {
      const Real jac = detail::mean_velocity_jacobian(t, sigma, dt);
      const auto dc = velocity_backward(model, eval, {dmu[0] * jac, dmu[1] * jac}, *grads);
      for (std::size_t i = 0; i < dcond.size(); ++i) {
        dcond[i] += dc[i];
      }
    }
  }
  if (grads != nullptr) {
    conditioning_backward(model, cond, std::span<const Real>(dcond), *grads);
  }
  return out;
}

template <typename Real>
struct ValueAndGrad {
  Real value = 0;
  nn::ParamVector<Real> grads;
};

template <typename Real>
ValueAndGrad<Real> traj_logprob_grad(const FlowModel<Real>& model, const Trajectory<Real>& traj) {
  ValueAndGrad<Real> out{Real(0), model.params().zeros_like()};
  out.value = trajectory_terms<Real>(model, nullptr, traj, Real(1), Real(0), &out.grads).logp;
  return out;
}

template <typename Real>
ValueAndGrad<Real> fm_kl(const FlowModel<Real>& model, const FlowModel<Real>& ref, const Trajectory<Real>& traj) {
  ValueAndGrad<Real> out{Real(0), model.params().zeros_like()};
  out.value = trajectory_terms<Real>(model, &ref, traj, Real(0), Real(1), &out.grads).kl;
  return out;
}

// --- conditional flow-matching pretraining ----------------------------------------

template <typename Real>
struct CfmExample {
  Prompt prompt;
  Point<Real> x0{};
  Point<Real> x1{};
  Real t = 0;
};

/// Mean of |v(x_t, t, p) - (x1 - x0)|^2 over the batch.
template <typename Real>
Real cfm_loss(const FlowModel<Real>& model, std::span<const CfmExample<Real>> batch,
              nn::ParamVector<Real>* grads) {
  require(!batch.empty(), ErrorCode::EmptySequence, "empty CFM batch");
  Real total = 0;
  const Real scale = Real(1) / static_cast<Real>(batch.size());
  for (const auto& ex : batch) {
    const auto cond = condition(model, ex.prompt);
    const Point<Real> xt{ex.t * ex.x1[0] + (Real(1) - ex.t) * ex.x0[0], ex.t * ex.x1[1] + (Real(1) - ex.t) * ex.x0[1]};
    const auto eval = velocity_forward(model, cond, xt, ex.t);
    const Real r0 = eval.v[0] - (ex.x1[0] - ex.x0[0]);
    const Real r1 = eval.v[1] - (ex.x1[1] - ex.x0[1]);
    total += (r0 * r0 + r1 * r1) * scale;
    if (grads != nullptr) {
      const auto dc = velocity_backward(model, eval, {Real(2) * r0 * scale, Real(2) * r1 * scale}, *grads);
      conditioning_backward(model, cond, std::span<const Real>(dc), *grads);
    }
  }
  return total;
}

/// One pretraining caption: a prompt, its true meaning, and the probability
/// that the corpus pairs it with a wrong component instead. When
/// `confused_with` is set the wrong component is always that one; otherwise
/// it is drawn uniformly from the others.
struct CorpusEntry {
  Prompt prompt;
  Semantics semantics;
  double mislabel = 0.0;
  std::optional<Semantics> confused_with;
};

enum class Confusion { Uniform, Systematic };

/// Caption noise of the pretraining corpus. `by_variant[v]` is the mislabel
/// rate attached to variant-v forms; a caption's rate is the mean over its
/// two forms. Systematic confusion sends every (meaning, color form, shape
/// form) pairing to its own fixed wrong component.
struct CaptionNoise {
  std::array<double, kNumVariants> by_variant{};
  Confusion confusion = Confusion::Uniform;
};

inline std::vector<CorpusEntry> pretraining_corpus(const World& world, const CaptionNoise& noise = {}) {
  for (double r : noise.by_variant) {
    require(r >= 0.0 && r < 1.0, ErrorCode::InvalidArgument, "mislabel rate must be in [0, 1)");
  }
  const int K = world.num_components();
  std::vector<CorpusEntry> corpus;
  for (int k = 0; k < K; ++k) {
    const Semantics sem = world.spec.semantics_of(k);
    for (int cv = 0; cv < kNumVariants; ++cv) {
      for (int sv = 0; sv < kNumVariants; ++sv) {
        CorpusEntry e{make_prompt(world, sem, cv, sv), sem,
                      0.5 * (noise.by_variant[static_cast<std::size_t>(cv)] +
                             noise.by_variant[static_cast<std::size_t>(sv)]),
                      std::nullopt};
        if (noise.confusion == Confusion::Systematic && K > 2) {
          // Opposite component, or the ones just either side of it.
          const int opposite = K / 2;
          const int offsets[kNumVariants] = {0, 1, -1};
          const int shift = opposite + offsets[(cv + sv) % kNumVariants];
          e.confused_with = world.spec.semantics_of((k + shift) % K);
        }
        corpus.push_back(std::move(e));
      }
    }
  }
  return corpus;
}

struct PretrainOptions {
  int steps = 20000;
  int batch = 32;
  double lr = 1e-3;
  nn::AdamWConfig adam{};
  int max_fillers = 1;           ///< random fillers inserted per caption
  double loss_threshold = 0.0;   ///< converged when running loss is below; 0 disables
  int running_window = 100;
  /// Captions that contain any of these fillers come from a curated source
  /// and use `marker_mislabel` instead of their entry's rate.
  std::vector<std::string> markers;
  double marker_mislabel = 0.0;
};

struct PretrainReport {
  double initial_loss = 0.0;
  double final_running_loss = 0.0;
  bool below_threshold = true;
  std::vector<double> losses;
};

template <typename Real>
PretrainReport cfm_pretrain(FlowModel<Real>& model, const World& world, const std::vector<CorpusEntry>& corpus,
                            RngStream& rng, const PretrainOptions& options) {
  require(!corpus.empty(), ErrorCode::InvalidArgument, "empty pretraining corpus");
  require(options.batch >= 1 && options.steps >= 0, ErrorCode::InvalidArgument, "pretraining options");
  nn::AdamW<Real> opt(model.params().size(), options.adam);
  PretrainReport report;
  report.losses.reserve(static_cast<std::size_t>(options.steps));
  std::vector<CfmExample<Real>> batch(static_cast<std::size_t>(options.batch));
  require(options.marker_mislabel >= 0.0 && options.marker_mislabel < 1.0, ErrorCode::InvalidArgument,
          "marker mislabel rate must be in [0, 1)");
  std::vector<TokenId> markers;
  for (const auto& m : options.markers) {
    const auto id = world.vocab.id(m);
    require(id.has_value() && world.vocab.is_filler(*id), ErrorCode::InvalidArgument,
            "caption marker '" + m + "' is not a filler");
    markers.push_back(*id);
  }
  auto is_marker = [&](TokenId t) { return std::find(markers.begin(), markers.end(), t) != markers.end(); };
  const auto& fillers = world.vocab.fillers();
  const int K = world.num_components();
  for (int step = 0; step < options.steps; ++step) {
    for (auto& ex : batch) {
      const auto& entry = corpus[rng.uniform_int(corpus.size())];
      ex.prompt = entry.prompt;
      if (options.max_fillers > 0 && !fillers.empty()) {
        const auto count = rng.uniform_int(static_cast<std::uint64_t>(options.max_fillers) + 1);
        for (std::uint64_t f = 0; f < count; ++f) {
          const auto pos = rng.uniform_int(ex.prompt.size() + 1);
          ex.prompt.insert(ex.prompt.begin() + static_cast<std::ptrdiff_t>(pos), fillers[rng.uniform_int(fillers.size())]);
        }
      }
      const bool curated = std::any_of(ex.prompt.begin(), ex.prompt.end(), is_marker);
      const double mislabel = curated ? options.marker_mislabel : entry.mislabel;
      Semantics target = entry.semantics;
      if (mislabel > 0.0 && rng.bernoulli(mislabel)) {
        if (!curated && entry.confused_with.has_value()) {
          target = entry.confused_with.value();
        } else {
          const int true_k = world.spec.component_index(entry.semantics);
          const int shift = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(K - 1)));
          target = world.spec.semantics_of((true_k + shift) % K);
        }
      }
      ex.x0 = {static_cast<Real>(rng.normal()), static_cast<Real>(rng.normal())};
      ex.x1 = sample_target<Real>(world, target, rng);
      ex.t = static_cast<Real>(rng.uniform());
    }
    auto grads = model.params().zeros_like();
    const Real loss = cfm_loss<Real>(model, batch, &grads);
    require(std::isfinite(static_cast<double>(loss)), ErrorCode::NonFiniteLoss,
            "CFM loss at step " + std::to_string(step));
    opt.step(model.params().values(), grads.values(), options.lr);
    report.losses.push_back(static_cast<double>(loss));
  }
  if (!report.losses.empty()) {
    report.initial_loss = report.losses.front();
    const std::size_t w = std::min<std::size_t>(report.losses.size(), static_cast<std::size_t>(options.running_window));
    double acc = 0.0;
    for (std::size_t i = report.losses.size() - w; i < report.losses.size(); ++i) {
      acc += report.losses[i];
    }
    report.final_running_loss = acc / static_cast<double>(w);
  }
  report.below_threshold = options.loss_threshold <= 0.0 || report.final_running_loss < options.loss_threshold;
  return report;
}

}  // namespace promptrl::flow
