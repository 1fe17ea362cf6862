// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: nested JSON with documented defaults. Every key
// is checked; unknown keys and out-of-range values raise ConfigError naming
// the offending path.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "promptrl/error.hpp"
#include "promptrl/flowfm.hpp"
#include "promptrl/grpo.hpp"
#include "promptrl/lmpolicy.hpp"
#include "promptrl/rewards.hpp"
#include "promptrl/toyworld.hpp"

namespace promptrl {

struct WorldConfig {
  WorldSpec spec{};
  std::vector<ParaphraseRow> table = ParaphraseTable::standard().rows();
  std::vector<std::string> fillers = default_fillers();
  bool train_fillers = false;

  World build() const { return World(spec, ParaphraseTable(table), fillers); }
};

struct FmPretrainConfig {
  int steps = 20000;
  int batch = 32;
  double lr = 1e-3;
  int max_fillers = 1;
  std::array<double, kNumVariants> caption_noise{0.5, 0.5, 0.5};
  flow::Confusion confusion = flow::Confusion::Systematic;
  std::vector<std::string> curated_fillers{"a", "the", "very"};
  double curated_noise = 0.05;
};

struct FmConfig {
  std::size_t embed_dim = 8;
  std::vector<std::size_t> hidden{64, 64};
  flow::NoiseSchedule schedule{};
  FmPretrainConfig pretrain{};
  /// Width of the independently pretrained generator used for transfer.
  std::vector<std::size_t> foreign_hidden{96, 96};
};

struct SftConfig {
  int max_steps = 5000;
  double lr = 1e-2;
  int check_every = 1;
  double target_nll = 0.08;
  /// Also train the identity rewrite of every prompt with one leading filler.
  bool filler_prompts = true;
};

struct LmConfig {
  std::size_t embed_dim = 16;
  std::size_t proj_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t max_len = 12;
  double temperature = 1.0;
  SftConfig sft{};
};

struct RewardsConfig {
  RewardWeights weights{};
  GenRewardParams gen{};
  grpo::TagMode tag_mode = grpo::TagMode::Single;
  RewardTag tag = RewardTag::Goal;
  RewardTarget reward_target = RewardTarget::Original;
};

struct GrpoConfig {
  grpo::GroupConfig group = [] {
    grpo::GroupConfig g;
    g.lr_fm = 1e-4;
    g.lr_lm = 1e-2;
    return g;
  }();
  int iterations = 500;
  int checkpoint_every = 100;
  int workers = 1;
  bool record_wall_time = false;
};

struct EvalConfig {
  int samples_per_prompt = 256;
  double lm_temperature = 1.0;
  std::uint64_t seed = 7;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int precision = 64;
  std::string output_dir = "runs/default";
  WorldConfig world{};
  FmConfig fm{};
  LmConfig lm{};
  RewardsConfig rewards{};
  GrpoConfig grpo{};
  EvalConfig eval{};

  flow::FmSpec fm_spec(std::size_t vocab_size) const { return {vocab_size, fm.embed_dim, fm.hidden}; }
  flow::FmSpec foreign_fm_spec(std::size_t vocab_size) const { return {vocab_size, fm.embed_dim, fm.foreign_hidden}; }
  lm::LmSpec lm_spec(std::size_t vocab_size) const {
    return {vocab_size, lm.embed_dim, lm.proj_dim, lm.hidden_dim, lm.max_len};
  }

  flow::PretrainOptions pretrain_options() const {
    flow::PretrainOptions o;
    o.steps = fm.pretrain.steps;
    o.batch = fm.pretrain.batch;
    o.lr = fm.pretrain.lr;
    o.max_fillers = fm.pretrain.max_fillers;
    o.markers = fm.pretrain.curated_fillers;
    o.marker_mislabel = fm.pretrain.curated_noise;
    return o;
  }
  flow::CaptionNoise caption_noise() const { return {fm.pretrain.caption_noise, fm.pretrain.confusion}; }

  lm::SftOptions sft_options() const {
    lm::SftOptions o;
    o.max_steps = lm.sft.max_steps;
    o.lr = lm.sft.lr;
    o.check_every = lm.sft.check_every;
    o.target_nll = lm.sft.target_nll;
    return o;
  }

  grpo::RunConfig run_config(grpo::TrainMode mode) const {
    grpo::RunConfig rc;
    rc.group = grpo.group;
    rc.schedule = fm.schedule;
    rc.temperature = lm.temperature;
    rc.weights = rewards.weights;
    rc.gen = rewards.gen;
    rc.tag_mode = rewards.tag_mode;
    rc.tag = rewards.tag;
    rc.reward_target = rewards.reward_target;
    rc.mode = mode;
    rc.iterations = grpo.iterations;
    rc.seed = seed;
    rc.workers = grpo.workers;
    rc.record_wall_time = grpo.record_wall_time;
    return rc;
  }
};

namespace detail {

/// Reads one JSON object, remembering which keys were consumed so leftovers
/// can be reported.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }
  }

  std::string path_of(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) {
      return;
    }
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) {
          throw ConfigError(path_of(key), "expected a boolean");
        }
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) {
          throw ConfigError(path_of(key), "expected an integer");
        }
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<std::int64_t>() < 0) {
            throw ConfigError(path_of(key), "expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) {
          throw ConfigError(path_of(key), "expected a number");
        }
      } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
        if (!it->is_array()) {
          throw ConfigError(path_of(key), "expected an array");
        }
        for (const auto& v : *it) {
          if (!v.is_number_unsigned()) {
            throw ConfigError(path_of(key), "expected non-negative integers");
          }
        }
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) {
          throw ConfigError(path_of(key), "expected a string");
        }
      }
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_of(key), e.what());
    }
  }

  /// Enumerated string value.
  template <typename E>
  void read_enum(const std::string& key, E& out, std::initializer_list<std::pair<const char*, E>> options) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) {
      return;
    }
    std::string allowed;
    if (it->is_string()) {
      const auto s = it->get<std::string>();
      for (const auto& [name, value] : options) {
        if (s == name) {
          out = value;
          return;
        }
      }
    }
    for (const auto& [name, value] : options) {
      allowed += allowed.empty() ? name : std::string("|") + name;
    }
    throw ConfigError(path_of(key), "expected one of " + allowed);
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    auto it = j_.find(key);
    return Section(it == j_.end() ? empty : *it, path_of(key));
  }

  const nlohmann::json* raw(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError(path_of(it.key()), "unknown key");
      }
    }
  }

  const std::string& path() const { return path_; }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void check(bool ok, const std::string& path, const std::string& reason) {
  if (!ok) {
    throw ConfigError(path, reason);
  }
}

inline const std::initializer_list<std::pair<const char*, flow::Confusion>> kConfusionNames = {
    {"uniform", flow::Confusion::Uniform}, {"systematic", flow::Confusion::Systematic}};

inline std::string confusion_name(flow::Confusion c) { return c == flow::Confusion::Uniform ? "uniform" : "systematic"; }

}  // namespace detail

/// Checks every cross-field precondition the modules rely on.
inline void validate(const ExperimentConfig& c) {
  using detail::check;
  check(c.precision == 32 || c.precision == 64, "precision", "must be 32 or 64");
  check(!c.output_dir.empty(), "output_dir", "must not be empty");

  check(c.world.spec.num_colors >= 1, "world.num_colors", "must be >= 1");
  check(c.world.spec.num_shapes >= 1, "world.num_shapes", "must be >= 1");
  check(c.world.spec.radius > 0.0, "world.radius", "must be > 0");
  check(c.world.spec.component_std > 0.0, "world.component_std", "must be > 0");
  try {
    (void)c.world.build();
  } catch (const Error& e) {
    throw ConfigError("world", e.what());
  }

  check(c.fm.embed_dim >= 1, "fm.embed_dim", "must be >= 1");
  check(!c.fm.hidden.empty(), "fm.hidden", "needs at least one hidden layer");
  for (auto h : c.fm.hidden) {
    check(h >= 1, "fm.hidden", "layer widths must be >= 1");
  }
  for (auto h : c.fm.foreign_hidden) {
    check(h >= 1, "fm.foreign_hidden", "layer widths must be >= 1");
  }
  check(c.fm.schedule.steps >= 1, "fm.steps", "must be >= 1");
  check(c.fm.schedule.sde_steps >= 0 && c.fm.schedule.sde_steps <= c.fm.schedule.steps, "fm.sde_steps",
        "sde_steps <= steps");
  check(c.fm.schedule.noise >= 0.0, "fm.noise", "must be >= 0");
  const auto& p = c.fm.pretrain;
  check(p.steps >= 0, "fm.pretrain.steps", "must be >= 0");
  check(p.batch >= 1, "fm.pretrain.batch", "must be >= 1");
  check(p.lr > 0.0, "fm.pretrain.lr", "must be > 0");
  check(p.max_fillers >= 0, "fm.pretrain.max_fillers", "must be >= 0");
  for (double r : p.caption_noise) {
    check(r >= 0.0 && r < 1.0, "fm.pretrain.caption_noise", "rates must be in [0, 1)");
  }
  check(p.curated_noise >= 0.0 && p.curated_noise < 1.0, "fm.pretrain.curated_noise", "must be in [0, 1)");
  {
    const World w = c.world.build();
    for (const auto& f : p.curated_fillers) {
      const auto id = w.vocab.id(f);
      check(id.has_value() && w.vocab.is_filler(*id), "fm.pretrain.curated_fillers", "'" + f + "' is not a filler");
    }
  }

  check(c.lm.embed_dim >= 1 && c.lm.proj_dim >= 1 && c.lm.hidden_dim >= 1, "lm", "dimensions must be >= 1");
  check(c.lm.max_len >= 4, "lm.max_len", "must be >= 4 (tags, one token, EOS)");
  check(c.lm.temperature >= 0.0, "lm.temperature", "must be >= 0");
  check(c.lm.sft.max_steps >= 0, "lm.sft.max_steps", "must be >= 0");
  check(c.lm.sft.lr > 0.0, "lm.sft.lr", "must be > 0");
  check(c.lm.sft.check_every >= 1, "lm.sft.check_every", "must be >= 1");
  check(c.lm.sft.target_nll >= 0.0, "lm.sft.target_nll", "must be >= 0");

  check(c.rewards.weights.format >= 0.0, "rewards.format_weight", "must be >= 0");
  check(c.rewards.weights.gen >= 0.0, "rewards.gen_weight", "must be >= 0");
  check(c.rewards.gen.goal_radius > 0.0, "rewards.goal_radius", "must be > 0");
  check(c.rewards.gen.pref_scale > 0.0, "rewards.pref_scale", "must be > 0");
  check(c.rewards.gen.pref_width > 0.0, "rewards.pref_width", "must be > 0");

  const auto& g = c.grpo.group;
  check(g.n >= 2, "grpo.n", "n >= 2");
  check(g.m >= 0, "grpo.m", "m >= 0");
  check(g.m <= g.n, "grpo.m", "m <= n");
  check(g.batch >= 1, "grpo.batch", "must be >= 1");
  check(g.eps_stab > 0.0, "grpo.eps_stab", "must be > 0");
  check(g.beta_fm >= 0.0, "grpo.beta_fm", "must be >= 0");
  check(g.beta_lm >= 0.0, "grpo.beta_lm", "must be >= 0");
  check(g.lr_fm >= 0.0, "grpo.lr_fm", "must be >= 0");
  check(g.lr_lm >= 0.0, "grpo.lr_lm", "must be >= 0");
  check(g.k_epochs == 1, "grpo.k_epochs", "only 1 is supported");
  check(c.grpo.iterations >= 0, "grpo.iterations", "must be >= 0");
  check(c.grpo.checkpoint_every >= 0, "grpo.checkpoint_every", "must be >= 0 (0 disables)");
  check(c.grpo.workers >= 1, "grpo.workers", "must be >= 1");

  check(c.eval.samples_per_prompt >= 2, "eval.samples_per_prompt", "must be >= 2");
  check(c.eval.lm_temperature >= 0.0, "eval.lm_temperature", "must be >= 0");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::Section root(j, "");
  root.read("seed", c.seed);
  root.read("precision", c.precision);
  root.read("output_dir", c.output_dir);

  {
    auto w = root.child("world");
    w.read("num_colors", c.world.spec.num_colors);
    w.read("num_shapes", c.world.spec.num_shapes);
    w.read("radius", c.world.spec.radius);
    w.read("component_std", c.world.spec.component_std);
    w.read("fillers", c.world.fillers);
    w.read("train_fillers", c.world.train_fillers);
    if (const auto* table = w.raw("table")) {
      detail::check(table->is_array(), "world.table", "expected an array of rows");
      c.world.table.clear();
      for (std::size_t i = 0; i < table->size(); ++i) {
        detail::Section r((*table)[i], "world.table[" + std::to_string(i) + "]");
        ParaphraseRow row;
        r.read_enum("slot", row.slot, {{"color", Slot::Color}, {"shape", Slot::Shape}});
        r.read("value", row.value);
        std::vector<std::string> forms;
        r.read("forms", forms);
        detail::check(forms.size() == kNumVariants, r.path_of("forms"), "exactly three surface forms");
        std::copy(forms.begin(), forms.end(), row.forms.begin());
        r.finish();
        c.world.table.push_back(std::move(row));
      }
    }
    w.finish();
  }
  {
    auto f = root.child("fm");
    f.read("embed_dim", c.fm.embed_dim);
    f.read("hidden", c.fm.hidden);
    f.read("foreign_hidden", c.fm.foreign_hidden);
    f.read("steps", c.fm.schedule.steps);
    f.read("sde_steps", c.fm.schedule.sde_steps);
    f.read("noise", c.fm.schedule.noise);
    auto p = f.child("pretrain");
    p.read("steps", c.fm.pretrain.steps);
    p.read("batch", c.fm.pretrain.batch);
    p.read("lr", c.fm.pretrain.lr);
    p.read("max_fillers", c.fm.pretrain.max_fillers);
    std::vector<double> noise(c.fm.pretrain.caption_noise.begin(), c.fm.pretrain.caption_noise.end());
    p.read("caption_noise", noise);
    detail::check(noise.size() == kNumVariants, "fm.pretrain.caption_noise", "one rate per surface variant (3)");
    std::copy(noise.begin(), noise.end(), c.fm.pretrain.caption_noise.begin());
    p.read_enum("confusion", c.fm.pretrain.confusion, detail::kConfusionNames);
    p.read("curated_fillers", c.fm.pretrain.curated_fillers);
    p.read("curated_noise", c.fm.pretrain.curated_noise);
    p.finish();
    f.finish();
  }
  {
    auto l = root.child("lm");
    l.read("embed_dim", c.lm.embed_dim);
    l.read("proj_dim", c.lm.proj_dim);
    l.read("hidden_dim", c.lm.hidden_dim);
    l.read("max_len", c.lm.max_len);
    l.read("temperature", c.lm.temperature);
    auto s = l.child("sft");
    s.read("max_steps", c.lm.sft.max_steps);
    s.read("lr", c.lm.sft.lr);
    s.read("check_every", c.lm.sft.check_every);
    s.read("target_nll", c.lm.sft.target_nll);
    s.read("filler_prompts", c.lm.sft.filler_prompts);
    s.finish();
    l.finish();
  }
  {
    auto r = root.child("rewards");
    r.read("format_weight", c.rewards.weights.format);
    r.read("gen_weight", c.rewards.weights.gen);
    r.read("goal_radius", c.rewards.gen.goal_radius);
    r.read("pref_scale", c.rewards.gen.pref_scale);
    r.read("pref_width", c.rewards.gen.pref_width);
    r.read_enum("tag_mode", c.rewards.tag_mode, {{"single", grpo::TagMode::Single}, {"multi", grpo::TagMode::Multi}});
    r.read_enum("tag", c.rewards.tag, {{"GOAL", RewardTag::Goal}, {"PREF", RewardTag::Pref}});
    r.read_enum("reward_target", c.rewards.reward_target,
                {{"original", RewardTarget::Original}, {"refined", RewardTarget::Refined}});
    r.finish();
  }
  {
    auto g = root.child("grpo");
    g.read("n", c.grpo.group.n);
    g.read("m", c.grpo.group.m);
    g.read("batch", c.grpo.group.batch);
    g.read("eps_stab", c.grpo.group.eps_stab);
    g.read("beta_fm", c.grpo.group.beta_fm);
    g.read("beta_lm", c.grpo.group.beta_lm);
    g.read("lr_fm", c.grpo.group.lr_fm);
    g.read("lr_lm", c.grpo.group.lr_lm);
    g.read("k_epochs", c.grpo.group.k_epochs);
    g.read("iterations", c.grpo.iterations);
    g.read("checkpoint_every", c.grpo.checkpoint_every);
    g.read("workers", c.grpo.workers);
    g.read("record_wall_time", c.grpo.record_wall_time);
    g.finish();
  }
  {
    auto e = root.child("eval");
    e.read("samples_per_prompt", c.eval.samples_per_prompt);
    e.read("lm_temperature", c.eval.lm_temperature);
    e.read("seed", c.eval.seed);
    e.finish();
  }
  root.finish();
  validate(c);
  return c;
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  using nlohmann::ordered_json;
  ordered_json world = to_json(c.world.build());
  world["train_fillers"] = c.world.train_fillers;
  ordered_json fm = {{"embed_dim", c.fm.embed_dim},
                     {"hidden", c.fm.hidden},
                     {"foreign_hidden", c.fm.foreign_hidden},
                     {"steps", c.fm.schedule.steps},
                     {"sde_steps", c.fm.schedule.sde_steps},
                     {"noise", c.fm.schedule.noise}};
  fm["pretrain"] = {{"steps", c.fm.pretrain.steps},
                    {"batch", c.fm.pretrain.batch},
                    {"lr", c.fm.pretrain.lr},
                    {"max_fillers", c.fm.pretrain.max_fillers},
                    {"caption_noise", c.fm.pretrain.caption_noise},
                    {"confusion", detail::confusion_name(c.fm.pretrain.confusion)},
                    {"curated_fillers", c.fm.pretrain.curated_fillers},
                    {"curated_noise", c.fm.pretrain.curated_noise}};
  ordered_json lm = {{"embed_dim", c.lm.embed_dim},   {"proj_dim", c.lm.proj_dim},
                     {"hidden_dim", c.lm.hidden_dim}, {"max_len", c.lm.max_len},
                     {"temperature", c.lm.temperature}};
  lm["sft"] = {{"max_steps", c.lm.sft.max_steps},
               {"lr", c.lm.sft.lr},
               {"check_every", c.lm.sft.check_every},
               {"target_nll", c.lm.sft.target_nll},
               {"filler_prompts", c.lm.sft.filler_prompts}};
  ordered_json rewards = {{"format_weight", c.rewards.weights.format},
                          {"gen_weight", c.rewards.weights.gen},
                          {"goal_radius", c.rewards.gen.goal_radius},
                          {"pref_scale", c.rewards.gen.pref_scale},
                          {"pref_width", c.rewards.gen.pref_width},
                          {"tag_mode", c.rewards.tag_mode == grpo::TagMode::Single ? "single" : "multi"},
                          {"tag", to_string(c.rewards.tag)},
                          {"reward_target", c.rewards.reward_target == RewardTarget::Original ? "original" : "refined"}};
  const auto& g = c.grpo.group;
  ordered_json grpo = {{"n", g.n},
                       {"m", g.m},
                       {"batch", g.batch},
                       {"eps_stab", g.eps_stab},
                       {"beta_fm", g.beta_fm},
                       {"beta_lm", g.beta_lm},
                       {"lr_fm", g.lr_fm},
                       {"lr_lm", g.lr_lm},
                       {"k_epochs", g.k_epochs},
                       {"iterations", c.grpo.iterations},
                       {"checkpoint_every", c.grpo.checkpoint_every},
                       {"workers", c.grpo.workers},
                       {"record_wall_time", c.grpo.record_wall_time}};
  ordered_json eval = {{"samples_per_prompt", c.eval.samples_per_prompt},
                       {"lm_temperature", c.eval.lm_temperature},
                       {"seed", c.eval.seed}};
  ordered_json j;
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  j["output_dir"] = c.output_dir;
  j["world"] = world;
  j["fm"] = fm;
  j["lm"] = lm;
  j["rewards"] = rewards;
  j["grpo"] = grpo;
  j["eval"] = eval;
  return j;
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return to_json(a) == to_json(b); }

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<string>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin, std::string("not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError(path.string(), "cannot open config file");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

}  // namespace promptrl
