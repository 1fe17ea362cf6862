// SPDX-License-Identifier: Apache-2.0
//
// promptrl: experiment driver. Every subcommand reads an optional --config
// file, resolves it against the defaults and writes under output_dir.
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "promptrl/promptrl.hpp"

namespace fs = std::filesystem;
using namespace promptrl;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct Common {
  std::string config_path;
  std::string output_dir;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config; omitted keys take defaults");
    cmd->add_option("--output-dir", output_dir, "overrides output_dir");
    cmd->add_option("--seed", seed, "overrides seed");
  }

  ExperimentConfig resolve() const {
    auto c = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (!output_dir.empty()) {
      c.output_dir = output_dir;
    }
    if (seed) {
      c.seed = *seed;
    }
    validate(c);
    return c;
  }
};

void print_error(const std::string& code, const std::string& message, const std::optional<std::string>& path = {}) {
  json j;
  j["error"] = code;
  if (path) {
    j["path"] = *path;
  }
  j["message"] = message;
  std::cerr << j.dump() << '\n';
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

double final_trailing(const std::vector<grpo::IterationRecord>& log) {
  const auto series = metrics::reward_series(log);
  return series.empty() ? 0.0 : metrics::trailing_mean(series).back();
}

// --- subcommands -----------------------------------------------------------

template <typename Real>
flow::FlowModel<Real> fm_or_pretrain(const Pipeline<Real>& p, const std::string& path) {
  if (!path.empty()) {
    return load_fm<Real>(path);
  }
  std::cerr << "pretraining generator (" << p.config().fm.pretrain.steps << " steps)\n";
  return p.pretrain_fm();
}

template <typename Real>
lm::RefinerModel<Real> lm_or_pretrain(const Pipeline<Real>& p, const std::string& path) {
  if (!path.empty()) {
    return load_lm<Real>(path);
  }
  std::cerr << "fine-tuning refiner\n";
  return p.pretrain_lm();
}

template <typename Real>
int pretrain_fm_cmd(const ExperimentConfig& cfg, bool foreign) {
  const Pipeline<Real> p(cfg);
  const RunDir dir(cfg.output_dir);
  dir.write_config(cfg);
  flow::PretrainReport report;
  const auto fm = foreign ? p.pretrain_foreign_fm(&report) : p.pretrain_fm(&report);
  const std::string name = foreign ? "fm_foreign.ckpt" : "fm_pretrained.ckpt";
  save_model(dir.root() / name, fm);
  dir.write_json("pretrain_fm_report.json", {{"checkpoint", name},
                                             {"steps", report.losses.size()},
                                             {"initial_loss", report.initial_loss},
                                             {"final_running_loss", report.final_running_loss},
                                             {"below_threshold", report.below_threshold}});
  std::cout << "generator: loss " << fixed(report.initial_loss) << " -> " << fixed(report.final_running_loss)
            << ", saved " << (dir.root() / name).string() << '\n';
  return 0;
}

template <typename Real>
int pretrain_lm_cmd(const ExperimentConfig& cfg) {
  const Pipeline<Real> p(cfg);
  const RunDir dir(cfg.output_dir);
  dir.write_config(cfg);
  lm::SftReport report;
  const auto lm = p.pretrain_lm(&report);
  save_model(dir.root() / "lm_sft.ckpt", lm);
  dir.write_json("pretrain_lm_report.json", {{"checkpoint", "lm_sft.ckpt"},
                                             {"steps", report.steps},
                                             {"converged", report.converged},
                                             {"mean_token_nll", report.mean_token_nll},
                                             {"exact_matches", report.exact_matches},
                                             {"pairs", p.sft_pairs().size()}});
  std::cout << "refiner: " << report.steps << " steps, nll " << fixed(report.mean_token_nll) << ", "
            << report.exact_matches << "/" << p.sft_pairs().size() << " exact"
            << (report.converged ? "" : " (did not reach target)") << '\n';
  return 0;
}

struct TrainOutcome {
  metrics::EvalReport no_pe;
  std::optional<metrics::EvalReport> with_pe;
  double final_trailing = 0.0;
  std::int64_t rollouts = 0;
};

/// Trains from the given starting models into `dir`: resolved config, log,
/// periodic and final checkpoints, eval report.
template <typename Real>
TrainOutcome train_into(const Pipeline<Real>& p, const RunDir& dir, grpo::TrainMode mode, flow::FlowModel<Real> fm,
                        lm::RefinerModel<Real> lm) {
  dir.write_config(p.config());
  const auto run = p.train(std::move(fm), std::move(lm), p.run_config(mode),
                           dir.recorder<Real>(p.config().grpo.checkpoint_every));
  save_model(dir.checkpoint("fm_final.ckpt"), run.state.fm);
  save_model(dir.checkpoint("lm_final.ckpt"), run.state.lm);

  TrainOutcome out;
  out.no_pe = p.evaluate(run.state.fm);
  json report;
  report["mode"] = to_string(mode);
  report["iterations"] = run.log.size();
  report["no_pe"] = out.no_pe.to_json();
  if (mode == grpo::TrainMode::PromptRL) {
    out.with_pe = p.evaluate(run.state.fm, &run.state.lm);
    report["with_pe"] = out.with_pe->to_json();
  }
  dir.write_json("eval_report.json", report);
  out.final_trailing = final_trailing(run.log);
  out.rollouts = run.log.empty() ? 0 : run.log.back().rollouts;
  return out;
}

template <typename Real>
int train_cmd(const ExperimentConfig& cfg, grpo::TrainMode mode, const std::string& fm_path,
              const std::string& lm_path) {
  const Pipeline<Real> p(cfg);
  const RunDir dir(cfg.output_dir);
  auto fm = fm_or_pretrain(p, fm_path);
  auto lm = lm_or_pretrain(p, lm_path);
  const auto out = train_into(p, dir, mode, std::move(fm), std::move(lm));
  std::cout << to_string(mode) << ": " << cfg.grpo.iterations << " iterations, " << out.rollouts
            << " rollouts, final trailing reward " << fixed(out.final_trailing) << '\n'
            << "eval without refiner: " << fixed(out.no_pe.mean_all()) << " (gap " << fixed(out.no_pe.paraphrase_gap)
            << ")\n";
  if (out.with_pe) {
    std::cout << "eval with refiner: " << fixed(out.with_pe->mean_all()) << " (format "
              << fixed(out.with_pe->format_rate.value_or(0.0)) << ")\n";
  }
  std::cout << "run directory: " << dir.root().string() << '\n';
  return 0;
}

template <typename Real>
int eval_cmd(const ExperimentConfig& cfg, bool with_pe, const std::string& fm_path, const std::string& lm_path) {
  const Pipeline<Real> p(cfg);
  const auto fm = fm_or_pretrain(p, fm_path);
  std::optional<lm::RefinerModel<Real>> lm;
  if (with_pe) {
    lm = lm_or_pretrain(p, lm_path);
  }
  const auto report = p.evaluate(fm, lm ? &*lm : nullptr);
  const RunDir dir(cfg.output_dir);
  dir.write_json("eval_report.json", report.to_json());
  std::cout << report.to_json().dump(2) << '\n';
  return 0;
}

template <typename Real>
int ablate_cmd(const ExperimentConfig& cfg, std::vector<int> ms, const std::string& fm_path,
               const std::string& lm_path) {
  std::sort(ms.begin(), ms.end());
  ms.erase(std::unique(ms.begin(), ms.end()), ms.end());
  // Reject the whole sweep up front rather than after the first runs.
  for (int m : ms) {
    auto c = cfg;
    c.grpo.group.m = m;
    validate(c);
  }
  const Pipeline<Real> base(cfg);
  const auto fm = fm_or_pretrain(base, fm_path);
  const auto lm = lm_or_pretrain(base, lm_path);
  const RunDir root(cfg.output_dir);
  root.write_config(cfg);

  json rows = json::array();
  std::string csv = "m,eval_no_pe,paraphrase_gap,final_trailing_reward\n";
  for (int m : ms) {
    auto c = cfg;
    c.grpo.group.m = m;
    c.output_dir = (fs::path(cfg.output_dir) / ("m_" + std::to_string(m))).string();
    const Pipeline<Real> p(c);
    std::cerr << "training m=" << m << '\n';
    const auto out = train_into(p, RunDir(c.output_dir), grpo::TrainMode::PromptRL, fm, lm);
    rows.push_back({{"m", m},
                    {"eval_no_pe", out.no_pe.mean_all()},
                    {"paraphrase_gap", out.no_pe.paraphrase_gap},
                    {"final_trailing_reward", out.final_trailing},
                    {"run_dir", c.output_dir}});
    csv += std::to_string(m) + "," + fixed(out.no_pe.mean_all(), 6) + "," + fixed(out.no_pe.paraphrase_gap, 6) + "," +
           fixed(out.final_trailing, 6) + "\n";
  }
  root.write_json("summary.json", {{"n", cfg.grpo.group.n}, {"rows", rows}});
  root.write_text("summary.csv", csv);

  std::cout << "   m  eval(no PE)  gap      final reward\n";
  for (const auto& r : rows) {
    std::cout << std::setw(4) << r["m"].get<int>() << "  " << std::setw(11) << fixed(r["eval_no_pe"].get<double>())
              << "  " << std::setw(7) << fixed(r["paraphrase_gap"].get<double>()) << "  "
              << fixed(r["final_trailing_reward"].get<double>()) << '\n';
  }
  return 0;
}

int curves_cmd(const std::vector<std::string>& logs, const std::string& out_path) {
  std::string csv = "rollouts,reward,seed,mode\n";
  for (const auto& path : logs) {
    const auto log = metrics::parse_log(read_text(path));
    const auto series = metrics::reward_series(log);
    for (std::size_t i = 0; i < log.size(); ++i) {
      std::ostringstream row;
      row << log[i].rollouts << ',' << std::setprecision(17) << series[i] << ',' << log[i].seed << ',' << log[i].mode
          << '\n';
      csv += row.str();
    }
  }
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    nn::write_file(out_path, csv);
  }
  return 0;
}

template <typename Real>
int transfer_cmd(const ExperimentConfig& cfg, const std::string& lm_path, const std::string& foreign_path) {
  const Pipeline<Real> p(cfg);
  const auto lm = load_lm<Real>(lm_path);
  const auto foreign = [&] {
    if (!foreign_path.empty()) {
      return load_fm<Real>(foreign_path);
    }
    std::cerr << "pretraining foreign generator\n";
    return p.pretrain_foreign_fm();
  }();
  const auto eo = p.eval_options();
  const auto with = metrics::transfer_eval(p.world(), lm, foreign, p.splits(), eo);
  const auto without =
      metrics::eval_suite(p.world(), foreign, static_cast<const lm::RefinerModel<Real>*>(nullptr), p.splits(), eo);
  const RunDir dir(cfg.output_dir);
  dir.write_json("transfer_report.json", {{"with_pe", with.to_json()},
                                          {"no_pe", without.to_json()},
                                          {"improvement", with.mean_all() - without.mean_all()}});
  std::cout << "foreign generator: " << fixed(without.mean_all()) << " without refiner, " << fixed(with.mean_all())
            << " with refiner\n";
  return 0;
}

int selftest_cmd(bool as_json) {
  const auto report = selftest::run_all();
  if (as_json) {
    std::cout << report.to_json().dump(2) << '\n';
  } else {
    for (const auto& s : report.sections) {
      std::cout << s.name << ": " << s.passed() << "/" << s.total() << " passed\n";
      for (const auto& c : s.checks) {
        if (!c.passed) {
          std::cout << "  FAILED " << c.name << ": " << c.detail << '\n';
        }
      }
    }
    std::cout << "total: " << report.passed() << "/" << report.total() << " passed\n";
  }
  return report.ok() ? 0 : kExitRuntime;
}

template <typename F>
int dispatch(const ExperimentConfig& cfg, F&& f) {
  return cfg.precision == 32 ? f(float{}) : f(double{});
}

int run(int argc, char** argv) {
  CLI::App app{"PromptRL desk lab: refiner and flow generator co-trained with GRPO on a 2-D world"};
  app.require_subcommand(1);

  Common common;
  std::string fm_path, lm_path, foreign_path, out_path, mode_name = "promptrl";
  bool foreign = false, with_pe = false, no_pe = false, as_json = false;
  std::vector<int> ms{0, 1, 2, 4};
  std::vector<std::string> logs;

  auto* pfm = app.add_subcommand("pretrain-fm", "pretrain the flow generator on the caption corpus");
  common.attach(pfm);
  pfm->add_flag("--foreign", foreign, "pretrain the independently seeded, wider generator instead");

  auto* plm = app.add_subcommand("pretrain-lm", "supervised identity fine-tuning of the refiner");
  common.attach(plm);

  auto* train = app.add_subcommand("train", "GRPO training; writes a run directory");
  common.attach(train);
  train->add_option("--mode", mode_name, "promptrl or flow-only")->check(CLI::IsMember({"promptrl", "flow-only"}));
  train->add_option("--fm", fm_path, "starting generator checkpoint (default: pretrain)");
  train->add_option("--lm", lm_path, "starting refiner checkpoint (default: fine-tune)");

  auto* eval = app.add_subcommand("eval", "original and paraphrase evaluation");
  common.attach(eval);
  auto* with_flag = eval->add_flag("--with-pe", with_pe, "refine prompts before generation");
  eval->add_flag("--no-pe", no_pe, "generate from the raw prompts")->excludes(with_flag);
  eval->add_option("--fm", fm_path, "generator checkpoint (default: pretrain)");
  eval->add_option("--lm", lm_path, "refiner checkpoint (default: fine-tune)");

  auto* ablate = app.add_subcommand("ablate-retention", "one training run per retention count m");
  common.attach(ablate);
  ablate->add_option("--m", ms, "retention counts")->delimiter(',');
  ablate->add_option("--fm", fm_path, "starting generator checkpoint");
  ablate->add_option("--lm", lm_path, "starting refiner checkpoint");

  auto* curves = app.add_subcommand("curves", "reward-vs-rollouts CSV from training logs");
  curves->add_option("--log", logs, "log.jsonl files")->required();
  curves->add_option("--out", out_path, "CSV path (default: stdout)");

  auto* transfer = app.add_subcommand("transfer", "evaluate a trained refiner on a foreign generator");
  common.attach(transfer);
  transfer->add_option("--lm", lm_path, "trained refiner checkpoint")->required();
  transfer->add_option("--foreign-fm", foreign_path, "foreign generator checkpoint (default: pretrain)");

  auto* selftest = app.add_subcommand("selftest", "gradient and invariant checks");
  selftest->add_flag("--json", as_json, "machine-readable report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("ConfigInvalid", e.what(), "argv");
    return kExitConfig;
  }

  try {
    if (selftest->parsed()) {
      return selftest_cmd(as_json);
    }
    if (curves->parsed()) {
      return curves_cmd(logs, out_path);
    }
    const auto cfg = common.resolve();
    if (pfm->parsed()) {
      return dispatch(cfg, [&]<typename R>(R) { return pretrain_fm_cmd<R>(cfg, foreign); });
    }
    if (plm->parsed()) {
      return dispatch(cfg, [&]<typename R>(R) { return pretrain_lm_cmd<R>(cfg); });
    }
    if (train->parsed()) {
      const auto mode = mode_name == "promptrl" ? grpo::TrainMode::PromptRL : grpo::TrainMode::FlowOnly;
      return dispatch(cfg, [&]<typename R>(R) { return train_cmd<R>(cfg, mode, fm_path, lm_path); });
    }
    if (eval->parsed()) {
      return dispatch(cfg, [&]<typename R>(R) { return eval_cmd<R>(cfg, with_pe, fm_path, lm_path); });
    }
    if (ablate->parsed()) {
      return dispatch(cfg, [&]<typename R>(R) { return ablate_cmd<R>(cfg, ms, fm_path, lm_path); });
    }
    if (transfer->parsed()) {
      return dispatch(cfg, [&]<typename R>(R) { return transfer_cmd<R>(cfg, lm_path, foreign_path); });
    }
  } catch (const ConfigError& e) {
    print_error("ConfigInvalid", e.reason(), e.path());
    return kExitConfig;
  } catch (const Error& e) {
    print_error(std::string(to_string(e.code())), e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    print_error("RuntimeFailure", e.what());
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
