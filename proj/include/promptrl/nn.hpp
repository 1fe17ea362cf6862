// SPDX-License-Identifier: Apache-2.0
//
// Small differentiable building blocks with hand-written reverse-mode
// gradients: flat parameter vectors, tanh MLPs, mean-pooled embeddings,
// AdamW, and a central finite-difference checker used as the test oracle.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "promptrl/error.hpp"
#include "promptrl/rng.hpp"
#include "promptrl/toyworld.hpp"

namespace promptrl::nn {

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Flat parameter storage partitioned into named, contiguous segments.
template <typename Real>
class ParamVector {
 public:
  using value_type = Real;

  std::size_t add_segment(std::string name, std::size_t rows, std::size_t cols) {
    const std::size_t offset = values_.size();
    segments_.push_back({std::move(name), offset, rows, cols});
    values_.resize(offset + rows * cols, Real(0));
    return segments_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& segment(std::size_t index) const { return segments_.at(index); }

  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      if (segments_[i].name == name) {
        return i;
      }
    }
    throw Error(ErrorCode::InvalidArgument, "no segment named " + name);
  }

  std::span<Real> values() { return values_; }
  std::span<const Real> values() const { return values_; }
  std::vector<Real>& storage() { return values_; }

  std::span<Real> view(std::size_t seg) {
    const auto& s = segments_.at(seg);
    return std::span<Real>(values_).subspan(s.offset, s.size());
  }
  std::span<const Real> view(std::size_t seg) const {
    const auto& s = segments_.at(seg);
    return std::span<const Real>(values_).subspan(s.offset, s.size());
  }
  /// Contiguous range covering segments [first, first + count).
  std::span<Real> range(std::size_t first, std::size_t count) {
    const auto& a = segments_.at(first);
    const auto& b = segments_.at(first + count - 1);
    return std::span<Real>(values_).subspan(a.offset, b.offset + b.size() - a.offset);
  }
  std::span<const Real> range(std::size_t first, std::size_t count) const {
    const auto& a = segments_.at(first);
    const auto& b = segments_.at(first + count - 1);
    return std::span<const Real>(values_).subspan(a.offset, b.offset + b.size() - a.offset);
  }

  ParamVector zeros_like() const {
    ParamVector out;
    out.segments_ = segments_;
    out.values_.assign(values_.size(), Real(0));
    return out;
  }

  void fill(Real v) { std::fill(values_.begin(), values_.end(), v); }

  bool same_layout(const ParamVector& other) const { return segments_ == other.segments_; }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](Real v) { return std::isfinite(v); });
  }

  ParamVector& operator+=(const ParamVector& other) {
    require(same_layout(other), ErrorCode::LengthMismatch, "parameter layouts differ");
    for (std::size_t i = 0; i < values_.size(); ++i) {
      values_[i] += other.values_[i];
    }
    return *this;
  }

  void axpy(Real alpha, const ParamVector& other) {
    require(same_layout(other), ErrorCode::LengthMismatch, "parameter layouts differ");
    for (std::size_t i = 0; i < values_.size(); ++i) {
      values_[i] += alpha * other.values_[i];
    }
  }

  template <typename Other>
  ParamVector<Other> cast() const {
    ParamVector<Other> out;
    for (const auto& s : segments_) {
      out.add_segment(s.name, s.rows, s.cols);
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
      out.values()[i] = static_cast<Other>(values_[i]);
    }
    return out;
  }

 private:
  std::vector<Segment> segments_;
  std::vector<Real> values_;
};

// --- MLP ---------------------------------------------------------------------

struct MlpSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims{64, 64};
  std::size_t output_dim = 1;

  std::size_t num_layers() const { return hidden_dims.size() + 1; }
  std::size_t layer_in(std::size_t l) const { return l == 0 ? input_dim : hidden_dims[l - 1]; }
  std::size_t layer_out(std::size_t l) const { return l == hidden_dims.size() ? output_dim : hidden_dims[l]; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      n += layer_out(l) * layer_in(l) + layer_out(l);
    }
    return n;
  }

  void validate() const {
    require(input_dim >= 1 && output_dim >= 1, ErrorCode::InvalidArgument, "MLP dims must be >= 1");
    for (auto h : hidden_dims) {
      require(h >= 1, ErrorCode::InvalidArgument, "MLP hidden dims must be >= 1");
    }
  }
};

/// Appends W (out x in, row-major) and b segments for every layer; returns the
/// index of the first segment. The whole MLP occupies one contiguous range.
template <typename Real>
std::size_t add_mlp_segments(ParamVector<Real>& params, const std::string& prefix, const MlpSpec& spec) {
  spec.validate();
  std::size_t first = params.segments().size();
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    params.add_segment(prefix + ".l" + std::to_string(l) + ".W", spec.layer_out(l), spec.layer_in(l));
    params.add_segment(prefix + ".l" + std::to_string(l) + ".b", spec.layer_out(l), 1);
  }
  return first;
}

/// Gaussian init scaled by 1/sqrt(fan_in); the final layer is multiplied by
/// `output_scale`. Biases start at zero.
template <typename Real>
void init_mlp(std::span<Real> params, const MlpSpec& spec, RngStream& rng, double output_scale = 1.0) {
  require(params.size() == spec.param_count(), ErrorCode::DimensionMismatch, "MLP parameter count");
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.layer_in(l);
    const std::size_t out = spec.layer_out(l);
    const double scale = (l + 1 == spec.num_layers() ? output_scale : 1.0) / std::sqrt(static_cast<double>(in));
    for (std::size_t i = 0; i < out * in; ++i) {
      params[off + i] = static_cast<Real>(scale * rng.normal());
    }
    off += out * in;
    for (std::size_t i = 0; i < out; ++i) {
      params[off + i] = Real(0);
    }
    off += out;
  }
}

template <typename Real>
struct MlpCache {
  /// activations[0] is the input; activations[l] the tanh output of layer l-1.
  std::vector<std::vector<Real>> activations;
  std::size_t param_count = 0;
};

template <typename Real>
struct MlpResult {
  std::vector<Real> output;
  MlpCache<Real> cache;
};

template <typename Real>
MlpResult<Real> mlp_apply(std::span<const Real> params, const MlpSpec& spec, std::span<const Real> input) {
  require(input.size() == spec.input_dim, ErrorCode::DimensionMismatch,
          "MLP input has " + std::to_string(input.size()) + " entries, expected " + std::to_string(spec.input_dim));
  require(params.size() == spec.param_count(), ErrorCode::DimensionMismatch, "MLP parameter count");
  MlpResult<Real> result;
  result.cache.param_count = params.size();
  result.cache.activations.reserve(spec.num_layers());
  result.cache.activations.emplace_back(input.begin(), input.end());
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.layer_in(l);
    const std::size_t out = spec.layer_out(l);
    const auto& x = result.cache.activations.back();
    const Real* w = params.data() + off;
    const Real* b = w + out * in;
    std::vector<Real> y(out);
    for (std::size_t i = 0; i < out; ++i) {
      Real acc = b[i];
      const Real* row = w + i * in;
      for (std::size_t j = 0; j < in; ++j) {
        acc += row[j] * x[j];
      }
      y[i] = acc;
    }
    off += out * in + out;
    if (l + 1 == spec.num_layers()) {
      result.output = std::move(y);
    } else {
      for (auto& v : y) {
        v = std::tanh(v);
      }
      result.cache.activations.push_back(std::move(y));
    }
  }
  return result;
}

/// Reverse pass for <upstream, output>. Parameter gradients are accumulated
/// into `param_grads`; the input gradient is returned.
template <typename Real>
std::vector<Real> mlp_grad(std::span<const Real> params, const MlpSpec& spec, const MlpCache<Real>& cache,
                           std::span<const Real> upstream, std::span<Real> param_grads) {
  require(cache.activations.size() == spec.num_layers() && cache.param_count == spec.param_count() &&
              cache.activations.front().size() == spec.input_dim,
          ErrorCode::StaleCache, "cache does not match MLP spec");
  require(upstream.size() == spec.output_dim, ErrorCode::DimensionMismatch, "upstream size");
  require(param_grads.size() == spec.param_count() && params.size() == spec.param_count(),
          ErrorCode::DimensionMismatch, "gradient buffer size");

  std::vector<std::size_t> offsets(spec.num_layers());
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    offsets[l] = off;
    off += spec.layer_out(l) * spec.layer_in(l) + spec.layer_out(l);
  }

  std::vector<Real> delta(upstream.begin(), upstream.end());  // dL/d(pre-activation) of layer l
  for (std::size_t l = spec.num_layers(); l-- > 0;) {
    const std::size_t in = spec.layer_in(l);
    const std::size_t out = spec.layer_out(l);
    const auto& x = cache.activations[l];
    const Real* w = params.data() + offsets[l];
    Real* gw = param_grads.data() + offsets[l];
    Real* gb = gw + out * in;
    std::vector<Real> dx(in, Real(0));
    for (std::size_t i = 0; i < out; ++i) {
      const Real d = delta[i];
      gb[i] += d;
      if (d == Real(0)) {
        continue;
      }
      const Real* row = w + i * in;
      Real* grow = gw + i * in;
      for (std::size_t j = 0; j < in; ++j) {
        grow[j] += d * x[j];
        dx[j] += d * row[j];
      }
    }
    if (l == 0) {
      return dx;
    }
    // x is tanh output of the previous layer.
    for (std::size_t j = 0; j < in; ++j) {
      dx[j] *= Real(1) - x[j] * x[j];
    }
    delta = std::move(dx);
  }
  return {};
}

// --- embeddings ----------------------------------------------------------------

struct EmbedCache {
  std::vector<std::pair<TokenId, std::size_t>> counts;
  std::size_t length = 0;
};

template <typename Real>
struct EmbedResult {
  std::vector<Real> output;
  EmbedCache cache;
};

/// Mean of the embedding rows of `tokens`; table is rows x cols, row-major.
template <typename Real>
EmbedResult<Real> embed_pool(std::span<const Real> table, std::size_t rows, std::size_t cols,
                             std::span<const TokenId> tokens) {
  require(!tokens.empty(), ErrorCode::EmptySequence, "embed_pool needs at least one token");
  require(table.size() == rows * cols, ErrorCode::DimensionMismatch, "embedding table size");
  EmbedResult<Real> result;
  result.output.assign(cols, Real(0));
  result.cache.length = tokens.size();
  for (TokenId t : tokens) {
    require(t >= 0 && static_cast<std::size_t>(t) < rows, ErrorCode::IdOutOfRange,
            "token id " + std::to_string(t) + " outside embedding table");
    auto it = std::find_if(result.cache.counts.begin(), result.cache.counts.end(),
                           [t](const auto& p) { return p.first == t; });
    if (it == result.cache.counts.end()) {
      result.cache.counts.emplace_back(t, 1);
    } else {
      ++it->second;
    }
  }
  // Sum in first-occurrence order with multiplicities so the result does not
  // depend on token order.
  std::sort(result.cache.counts.begin(), result.cache.counts.end());
  const Real inv_len = Real(1) / static_cast<Real>(tokens.size());
  for (const auto& [t, count] : result.cache.counts) {
    const Real w = static_cast<Real>(count) * inv_len;
    const Real* row = table.data() + static_cast<std::size_t>(t) * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      result.output[c] += w * row[c];
    }
  }
  return result;
}

template <typename Real>
void embed_pool_grad(const EmbedCache& cache, std::size_t cols, std::span<const Real> upstream,
                     std::span<Real> table_grads) {
  require(upstream.size() == cols, ErrorCode::DimensionMismatch, "upstream size");
  const Real inv_len = Real(1) / static_cast<Real>(cache.length);
  for (const auto& [t, count] : cache.counts) {
    const Real w = static_cast<Real>(count) * inv_len;
    Real* row = table_grads.data() + static_cast<std::size_t>(t) * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] += w * upstream[c];
    }
  }
}

// --- optimizer -------------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with bias correction and decoupled weight decay.
template <typename Real>
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::size_t size, AdamWConfig config) : config_(config), m_(size, Real(0)), v_(size, Real(0)) {}

  const AdamWConfig& config() const { return config_; }
  std::size_t step_count() const { return t_; }
  std::span<const Real> first_moment() const { return m_; }
  std::span<const Real> second_moment() const { return v_; }

  void step(std::span<Real> params, std::span<const Real> grads, double lr) {
    require(params.size() == m_.size() && grads.size() == m_.size(), ErrorCode::LengthMismatch,
            "AdamW state, params and grads must have equal length");
    ++t_;
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i];
      const double m = b1 * m_[i] + (1.0 - b1) * g;
      const double v = b2 * v_[i] + (1.0 - b2) * g * g;
      m_[i] = static_cast<Real>(m);
      v_[i] = static_cast<Real>(v);
      const double update = (m / c1) / (std::sqrt(v / c2) + config_.eps) + config_.weight_decay * params[i];
      params[i] = static_cast<Real>(params[i] - lr * update);
    }
  }

 private:
  AdamWConfig config_{};
  std::vector<Real> m_;
  std::vector<Real> v_;
  std::size_t t_ = 0;
};

// --- gradient checking -------------------------------------------------------------

template <typename Real>
struct LossAndGrad {
  Real loss = Real(0);
  std::vector<Real> grad;
};

/// Compares the analytic gradient against central differences on `probes`
/// random coordinates. Relative error uses max(|analytic|, |numeric|, 1e-8).
template <typename Real>
double finite_diff_check(const std::function<LossAndGrad<Real>(std::span<const Real>)>& loss,
                         std::span<const Real> params, int probes, RngStream& rng, double h = 1e-5) {
  require(probes >= 1, ErrorCode::InvalidArgument, "probes must be >= 1");
  const auto analytic = loss(params);
  require(std::isfinite(static_cast<double>(analytic.loss)), ErrorCode::NonFiniteLoss, "loss at base point");
  require(analytic.grad.size() == params.size(), ErrorCode::LengthMismatch, "gradient length");
  std::vector<Real> probe(params.begin(), params.end());
  double worst = 0.0;
  for (int p = 0; p < probes; ++p) {
    const std::size_t i = rng.uniform_int(params.size());
    const Real saved = probe[i];
    probe[i] = static_cast<Real>(saved + h);
    const double up = static_cast<double>(loss(probe).loss);
    probe[i] = static_cast<Real>(saved - h);
    const double down = static_cast<double>(loss(probe).loss);
    probe[i] = saved;
    require(std::isfinite(up) && std::isfinite(down), ErrorCode::NonFiniteLoss, "loss at probe point");
    const double numeric = (up - down) / (2.0 * h);
    const double a = static_cast<double>(analytic.grad[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace promptrl::nn
