#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "deqr/errors.hpp"
#include "deqr/experiment.hpp"
#include "deqr/report.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::int64_t seed = -1;
  std::string out_dir;
};

deqr::ExperimentConfig load_config(const CommonOpts& opts) {
  deqr::ExperimentConfig cfg = opts.config_path.empty()
                                   ? deqr::parse_experiment_config_text(
                                         "", "<defaults>")
                                   : deqr::parse_experiment_config(
                                         opts.config_path);
  if (opts.seed >= 0) {
    cfg.seed = static_cast<std::uint64_t>(opts.seed);
    cfg.training.seed = cfg.seed;
    cfg.attack_base.seed = cfg.seed ^ 0xa77ac4u;
  }
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "configuration file");
  cmd->add_option("--seed", opts.seed, "override the configured seed");
  cmd->add_option("--out", opts.out_dir, "override the output directory");
}

int run_single_stage(const CommonOpts& opts, const std::string& stage) {
  return deqr::run_experiment(load_config(opts), stage);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep-equilibrium classifier lab: fixed-point solvers, "
               "adversarial attacks and training, test-time entropy "
               "reduction, and evaluation reports"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string run_stage;
  std::uint64_t gradcheck_count = 200;

  CLI::App* gen = app.add_subcommand("gen-data", "generate the dataset");
  add_common(gen, opts);
  CLI::App* train = app.add_subcommand("train", "adversarial training");
  add_common(train, opts);
  CLI::App* attack =
      app.add_subcommand("attack", "ready-made PGD plus the full attack grid");
  add_common(attack, opts);
  CLI::App* defend = app.add_subcommand(
      "defend", "re-score saved adversarial inputs with the defense on");
  add_common(defend, opts);
  CLI::App* report =
      app.add_subcommand("report", "full evaluation report and plot data");
  add_common(report, opts);
  CLI::App* run = app.add_subcommand("run", "run the configured stages");
  add_common(run, opts);
  run->add_option("--stage", run_stage, "run only this stage");
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "cross-check reverse-mode gradients against finite "
                   "differences");
  add_common(gradcheck, opts);
  gradcheck->add_option("--count", gradcheck_count, "number of random instances");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_single_stage(opts, "gen-data");
    if (train->parsed()) return run_single_stage(opts, "train");
    if (attack->parsed()) return run_single_stage(opts, "attack");
    if (defend->parsed()) return run_single_stage(opts, "defend");
    if (report->parsed()) return run_single_stage(opts, "report");
    if (run->parsed()) {
      const deqr::ExperimentConfig cfg = load_config(opts);
      return deqr::run_experiment(cfg, run_stage);
    }
    if (gradcheck->parsed()) {
      const deqr::ExperimentConfig cfg = load_config(opts);
      const deqr::GradCheckSummary summary =
          deqr::run_gradcheck(gradcheck_count, cfg.seed);
      std::cout << "gradcheck over " << summary.instances << " instances\n"
                << "  unrolled cross-entropy: max rel err "
                << deqr::format_double(summary.max_rel_error_unrolled_ce)
                << "\n  entropy objective:      max rel err "
                << deqr::format_double(summary.max_rel_error_entropy_objective)
                << "\n  trades loss:            max rel err "
                << deqr::format_double(summary.max_rel_error_trades) << "\n";
      const bool ok = summary.passed(1e-4);
      std::cout << (ok ? "PASS" : "FAIL") << " (tolerance 1e-4)\n";
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
