// SPDX-License-Identifier: Apache-2.0
//
// End-to-end pipeline shared by the command-line tool and the acceptance
// suite: splits, generator pretraining, refiner SFT, GRPO and evaluation, all
// derived from one ExperimentConfig.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "promptrl/checkpoint.hpp"
#include "promptrl/config.hpp"
#include "promptrl/flowfm.hpp"
#include "promptrl/grpo.hpp"
#include "promptrl/lmpolicy.hpp"
#include "promptrl/metrics.hpp"
#include "promptrl/rng.hpp"
#include "promptrl/toyworld.hpp"

namespace promptrl {

/// Independent random domains per pipeline stage, keyed off the root seed.
enum class SeedDomain : std::uint64_t { Splits = 100, Fm = 200, Lm = 300, ForeignFm = 400 };

inline RngStream domain_stream(std::uint64_t seed, SeedDomain domain) {
  return RngStream(seed, static_cast<std::uint64_t>(domain));
}

template <typename Real>
struct TrainRun {
  grpo::TrainState<Real> state;
  std::vector<grpo::IterationRecord> log;
};

template <typename Real>
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig config) : config_(std::move(config)), world_(config_.world.build()) {
    validate(config_);
    auto rng = domain_stream(config_.seed, SeedDomain::Splits);
    splits_ = build_splits(world_, rng, config_.world.train_fillers);
  }

  const ExperimentConfig& config() const { return config_; }
  const World& world() const { return world_; }
  const Splits& splits() const { return splits_; }

  flow::FlowModel<Real> pretrain_fm(flow::PretrainReport* report = nullptr) const {
    return pretrain_generator(config_.fm_spec(world_.vocab.size()), SeedDomain::Fm, report);
  }

  /// A second generator with its own seed and width, never trained with the refiner.
  flow::FlowModel<Real> pretrain_foreign_fm(flow::PretrainReport* report = nullptr) const {
    return pretrain_generator(config_.foreign_fm_spec(world_.vocab.size()), SeedDomain::ForeignFm, report);
  }

  /// Identity rewrites for every prompt form, optionally with one leading filler.
  std::vector<lm::SftPair> sft_pairs() const {
    std::vector<std::optional<TokenId>> prefixes{std::nullopt};
    if (config_.lm.sft.filler_prompts) {
      for (TokenId f : world_.vocab.fillers()) {
        prefixes.emplace_back(f);
      }
    }
    std::vector<lm::SftPair> pairs;
    for (int k = 0; k < world_.num_components(); ++k) {
      const auto sem = world_.spec.semantics_of(k);
      for (int v = 0; v < kNumVariants; ++v) {
        for (const auto& prefix : prefixes) {
          auto p = make_prompt(world_, sem, v);
          if (prefix) {
            p.insert(p.begin(), *prefix);
          }
          pairs.push_back({p, lm::identity_target(world_.vocab, p)});
        }
      }
    }
    return pairs;
  }

  lm::RefinerModel<Real> pretrain_lm(lm::SftReport* report = nullptr) const {
    auto rng = domain_stream(config_.seed, SeedDomain::Lm);
    auto model = lm::RefinerModel<Real>::random(config_.lm_spec(world_.vocab.size()), rng);
    auto r = lm::sft_init(model, world_.vocab, sft_pairs(), config_.sft_options());
    if (report != nullptr) {
      *report = r;
    }
    return model;
  }

  grpo::RunConfig run_config(grpo::TrainMode mode) const { return config_.run_config(mode); }

  TrainRun<Real> train(flow::FlowModel<Real> fm, lm::RefinerModel<Real> lm, const grpo::RunConfig& rc,
                       const std::function<void(const grpo::IterationRecord&, const grpo::TrainState<Real>&)>&
                           on_record = {}) const {
    TrainRun<Real> run{grpo::TrainState<Real>::start(std::move(fm), std::move(lm), rc.seed, rc.adam), {}};
    run.log = grpo::train(world_, splits_.train, run.state, rc, on_record);
    return run;
  }

  TrainRun<Real> train(flow::FlowModel<Real> fm, lm::RefinerModel<Real> lm, grpo::TrainMode mode) const {
    return train(std::move(fm), std::move(lm), run_config(mode));
  }

  metrics::EvalOptions eval_options() const {
    metrics::EvalOptions o;
    o.samples_per_prompt = config_.eval.samples_per_prompt;
    o.steps = config_.fm.schedule.steps;
    o.seed = config_.eval.seed;
    o.lm_temperature = config_.eval.lm_temperature;
    o.tag = config_.rewards.tag;
    o.gen = config_.rewards.gen;
    return o;
  }

  /// With `lm` set, prompts are refined before generation.
  metrics::EvalReport evaluate(const flow::FlowModel<Real>& fm, const lm::RefinerModel<Real>* lm = nullptr) const {
    return metrics::eval_suite(world_, fm, lm, splits_, eval_options());
  }

 private:
  flow::FlowModel<Real> pretrain_generator(const flow::FmSpec& spec, SeedDomain domain,
                                           flow::PretrainReport* report) const {
    auto rng = domain_stream(config_.seed, domain);
    auto model = flow::FlowModel<Real>::random(spec, rng);
    const auto corpus = flow::pretraining_corpus(world_, config_.caption_noise());
    auto r = flow::cfm_pretrain(model, world_, corpus, rng, config_.pretrain_options());
    if (report != nullptr) {
      *report = std::move(r);
    }
    return model;
  }

  ExperimentConfig config_;
  World world_;
  Splits splits_;
};

// --- persistence -----------------------------------------------------------

template <typename Real>
void save_model(const std::filesystem::path& path, const flow::FlowModel<Real>& m) {
  nn::write_file(path.string(), nn::encode_checkpoint(m.params(), m.spec().to_json()));
}

template <typename Real>
void save_model(const std::filesystem::path& path, const lm::RefinerModel<Real>& m) {
  nn::write_file(path.string(), nn::encode_checkpoint(m.params(), m.spec().to_json()));
}

template <typename Real>
flow::FlowModel<Real> load_fm(const std::filesystem::path& path) {
  nn::DecodedHeader header;
  auto params = nn::decode_checkpoint<Real>(nn::read_file(path.string()), &header);
  return flow::FlowModel<Real>(flow::FmSpec::from_json(header.model), std::move(params));
}

template <typename Real>
lm::RefinerModel<Real> load_lm(const std::filesystem::path& path) {
  nn::DecodedHeader header;
  auto params = nn::decode_checkpoint<Real>(nn::read_file(path.string()), &header);
  return lm::RefinerModel<Real>(lm::LmSpec::from_json(header.model), std::move(params));
}

/// Run directory layout: config.resolved.json, log.jsonl (one record per
/// iteration, flushed as written), checkpoints/ and eval_report.json.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root) : root_(std::move(root)) {
    std::error_code ec;
    std::filesystem::create_directories(root_ / "checkpoints", ec);
    require(!ec, ErrorCode::Io, "cannot create run directory " + root_.string() + ": " + ec.message());
  }

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path log_path() const { return root_ / "log.jsonl"; }
  std::filesystem::path checkpoint(const std::string& name) const { return root_ / "checkpoints" / name; }

  void write_config(const ExperimentConfig& c) const { write_text("config.resolved.json", to_json(c).dump(2) + "\n"); }

  void write_json(const std::string& name, const nlohmann::ordered_json& j) const { write_text(name, j.dump(2) + "\n"); }

  void write_text(const std::string& name, const std::string& text) const {
    nn::write_file((root_ / name).string(), text);
  }

  /// Callback for Pipeline::train that streams the log and writes periodic
  /// checkpoints; the log file is truncated when the callback is created.
  template <typename Real>
  std::function<void(const grpo::IterationRecord&, const grpo::TrainState<Real>&)> recorder(int checkpoint_every) const {
    auto out = std::make_shared<std::ofstream>(log_path(), std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(*out), ErrorCode::Io, "cannot open " + log_path().string());
    return [dir = *this, out, checkpoint_every](const grpo::IterationRecord& rec, const grpo::TrainState<Real>& st) {
      *out << rec.to_json().dump() << '\n';
      out->flush();
      require(static_cast<bool>(*out), ErrorCode::Io, "log write failed");
      if (checkpoint_every > 0 && rec.iter % checkpoint_every == 0) {
        const auto tag = std::to_string(rec.iter);
        save_model(dir.checkpoint("fm_" + tag + ".ckpt"), st.fm);
        save_model(dir.checkpoint("lm_" + tag + ".ckpt"), st.lm);
      }
    };
  }

 private:
  std::filesystem::path root_;
};

}  // namespace promptrl
