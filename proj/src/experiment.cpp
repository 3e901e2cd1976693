#include "deqr/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "deqr/checkpoint.hpp"
#include "deqr/config.hpp"
#include "deqr/errors.hpp"
#include "deqr/report.hpp"
#include "deqr/rng.hpp"
#include "deqr/unroll.hpp"

namespace deqr {

namespace {

const std::set<std::string> kKnownStages = {"gen-data", "train", "attack",
                                            "defend", "report"};

Nonlinearity nonlinearity_from_name(const std::string& name,
                                    const std::string& origin) {
  if (name == "tanh") return Nonlinearity::kTanh;
  if (name == "relu") return Nonlinearity::kRelu;
  if (name == "identity") return Nonlinearity::kIdentity;
  throw ConfigError(origin + ": unknown nonlinearity '" + name + "'");
}

ExperimentConfig from_config_file(const ConfigFile& file) {
  ExperimentConfig cfg;
  cfg.origin = file.origin();
  cfg.out_dir = file.get_string("out_dir", cfg.out_dir);
  cfg.seed = file.get_uint("seed", cfg.seed);
  cfg.stages = file.get_list("stages");
  for (const std::string& stage : cfg.stages) {
    if (kKnownStages.count(stage) == 0) {
      throw ConfigError(cfg.origin + ": unknown stage '" + stage + "'");
    }
  }

  cfg.dataset_csv = file.get_string("dataset.path", "");
  cfg.dataset_kind = dataset_kind_from_name(
      file.get_string("dataset.kind", "gaussian_blobs"));
  cfg.dataset_n = file.get_uint("dataset.n", cfg.dataset_n);
  cfg.dataset_noise = file.get_number("dataset.noise", cfg.dataset_noise);
  cfg.num_classes = file.get_uint("dataset.classes", cfg.num_classes);
  cfg.csv_domain_lo = file.get_number("dataset.domain_lo", cfg.csv_domain_lo);
  cfg.csv_domain_hi = file.get_number("dataset.domain_hi", cfg.csv_domain_hi);

  cfg.state_dim = file.get_uint("model.state_dim", cfg.state_dim);
  cfg.sigma = nonlinearity_from_name(
      file.get_string("model.nonlinearity", "tanh"), cfg.origin);
  cfg.gamma = file.get_number("model.gamma", cfg.gamma);

  cfg.solver.iterations = file.get_uint("solver.iterations", 8);
  const std::string method = file.get_string("solver.method", "anderson");
  if (method == "naive") {
    cfg.solver.method = SolveMethod::kNaive;
  } else if (method == "anderson") {
    cfg.solver.method = SolveMethod::kAnderson;
  } else {
    throw ConfigError(cfg.origin + ": unknown solver method '" + method + "'");
  }
  cfg.solver.damping = file.get_number("solver.damping", 1.0);
  cfg.solver.anderson_depth = file.get_uint("solver.anderson_depth", 5);
  cfg.solver.anderson_mix = file.get_number("solver.anderson_mix", 1.0);
  cfg.solver.tol = file.get_number("solver.tol", 0.0);

  const std::string framework = file.get_string("training.framework", "pgd_at");
  if (framework == "pgd_at") {
    cfg.training.framework = Framework::kPgdAt;
  } else if (framework == "trades") {
    cfg.training.framework = Framework::kTrades;
  } else {
    throw ConfigError(cfg.origin + ": unknown framework '" + framework + "'");
  }
  cfg.training.random_intermediate =
      file.get_bool("training.random_intermediate", false);
  cfg.training.epochs = file.get_uint("training.epochs", 30);
  cfg.training.batch_size = file.get_uint("training.batch_size", 32);
  cfg.training.lr0 = file.get_number("training.lr0", 0.001);
  cfg.training.beta1 = file.get_number("training.beta1", 0.9);
  cfg.training.beta2 = file.get_number("training.beta2", 0.999);
  cfg.training.eps_adam = file.get_number("training.eps_adam", 1e-8);
  cfg.training.trades_weight = file.get_number("training.trades_weight", 6.0);
  cfg.training.phantom_steps = file.get_uint("training.phantom_steps", 5);
  cfg.training.rescale_each_step =
      file.get_bool("training.rescale_each_step", true);
  cfg.training.seed = cfg.seed;

  cfg.attack_base.steps = file.get_uint("attack.steps", 10);
  cfg.attack_base.budget = file.get_number("attack.epsilon", 8.0 / 255.0);
  cfg.attack_base.step_size = file.get_number("attack.alpha", 2.0 / 255.0);
  cfg.attack_base.random_start = file.get_bool("attack.random_start", true);
  cfg.attack_base.seed = cfg.seed ^ 0xa77ac4u;
  cfg.margin_fraction = file.get_number("attack.margin_fraction", 0.25);

  cfg.defense.enabled = file.get_bool("defense.enabled", true);
  cfg.defense.beta = file.get_number("defense.beta", 2.0 / 255.0);
  cfg.defense.inner_steps = file.get_uint("defense.inner_steps", 10);
  cfg.defense.frequency = file.get_uint("defense.frequency", 2);
  cfg.defense.budget =
      file.get_number("defense.budget", cfg.attack_base.budget);

  cfg.prediction_state = file.get_string("eval.prediction_state", "final");
  cfg.entropy_at_early_state =
      file.get_bool("eval.entropy_at_early_state", false);
  if (cfg.prediction_state != "final" && cfg.prediction_state != "auto") {
    const double v = parse_number(cfg.prediction_state,
                                  cfg.origin + ": eval.prediction_state");
    if (v < 1.0 || v > static_cast<double>(cfg.solver.iterations)) {
      throw ConfigError(cfg.origin + ": eval.prediction_state outside 1..N");
    }
  }

  file.check_all_consumed();
  cfg.solver.validate();
  cfg.training.validate();
  if (!cfg.dataset_csv.empty() && !std::filesystem::exists(cfg.dataset_csv)) {
    throw ConfigError(cfg.origin + ": dataset.path '" + cfg.dataset_csv +
                      "' does not exist");
  }
  return cfg;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& path) {
  return from_config_file(ConfigFile::parse_file(path));
}

ExperimentConfig parse_experiment_config_text(const std::string& text,
                                              const std::string& origin) {
  return from_config_file(ConfigFile::parse_text(text, origin));
}

void resolve_budgets(ExperimentConfig& cfg, const Dataset& ds) {
  if (cfg.margin_fraction > 0.0 && ds.margin > 0.0) {
    const double eps = cfg.margin_fraction * ds.margin;
    cfg.attack_base.budget = eps;
    cfg.attack_base.step_size = eps / 4.0;
    cfg.training.epsilon = eps;
    cfg.training.alpha = eps / 4.0;
    cfg.defense.budget = eps;
    cfg.defense.beta = eps / 4.0;
  } else {
    cfg.training.epsilon = cfg.attack_base.budget;
    cfg.training.alpha = cfg.attack_base.step_size;
  }
}

namespace {

constexpr char kAttackMagic[4] = {'D', 'E', 'Q', 'A'};
constexpr std::uint32_t kAttackVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_u64(out, bits);
}

std::uint32_t read_u32(std::istream& in, const char* what) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (in.gcount() != 4) {
    throw TruncationError(std::string("attack file: truncated ") + what);
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in, const char* what) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (in.gcount() != 8) {
    throw TruncationError(std::string("attack file: truncated ") + what);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in, const char* what) {
  const std::uint64_t bits = read_u64(in, what);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace

void save_attacks(const std::string& path,
                  const std::vector<SavedAttack>& all) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_attacks: cannot open '" + path + "'");
  out.write(kAttackMagic, 4);
  write_u32(out, kAttackVersion);
  write_u32(out, static_cast<std::uint32_t>(all.size()));
  for (const SavedAttack& entry : all) {
    write_u32(out, static_cast<std::uint32_t>(entry.tag.size()));
    out.write(entry.tag.data(),
              static_cast<std::streamsize>(entry.tag.size()));
    const AttackSpec& s = entry.spec;
    out.put(static_cast<char>(s.kind));
    write_u64(out, s.state_index);
    write_u64(out, s.unroll_steps);
    write_f64(out, s.damping);
    write_u64(out, s.steps);
    write_f64(out, s.step_size);
    write_f64(out, s.budget);
    out.put(s.random_start ? 1 : 0);
    write_u64(out, s.seed);
    write_u64(out, entry.batch.size());
    write_u64(out, entry.batch.inputs.empty()
                       ? 0
                       : entry.batch.inputs.front().numel());
    for (std::size_t j = 0; j < entry.batch.size(); ++j) {
      write_u32(out, static_cast<std::uint32_t>(entry.batch.labels[j]));
      for (double v : entry.batch.inputs[j].data()) write_f64(out, v);
    }
  }
  if (!out) throw IoError("save_attacks: write failed for '" + path + "'");
}

std::vector<SavedAttack> load_attacks(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_attacks: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4) throw TruncationError("attack file: truncated magic");
  if (std::memcmp(magic, kAttackMagic, 4) != 0) {
    throw BadMagicError("attack file: bad magic in '" + path + "'");
  }
  const std::uint32_t version = read_u32(in, "version");
  if (version != kAttackVersion) {
    throw VersionMismatchError(version, kAttackVersion,
                               "attack file: version mismatch");
  }
  const std::uint32_t count = read_u32(in, "entry count");
  std::vector<SavedAttack> all;
  all.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    SavedAttack entry;
    const std::uint32_t tag_len = read_u32(in, "tag length");
    entry.tag.resize(tag_len);
    in.read(entry.tag.data(), tag_len);
    if (in.gcount() != static_cast<std::streamsize>(tag_len)) {
      throw TruncationError("attack file: truncated tag");
    }
    const int kind = in.get();
    if (kind < 0) throw TruncationError("attack file: truncated kind");
    if (kind > 2) throw IoError("attack file: unknown attack kind");
    entry.spec.kind = static_cast<AttackKind>(kind);
    entry.spec.state_index = read_u64(in, "state index");
    entry.spec.unroll_steps = read_u64(in, "unroll steps");
    entry.spec.damping = read_f64(in, "damping");
    entry.spec.steps = read_u64(in, "steps");
    entry.spec.step_size = read_f64(in, "step size");
    entry.spec.budget = read_f64(in, "budget");
    const int rs = in.get();
    if (rs < 0) throw TruncationError("attack file: truncated flag");
    entry.spec.random_start = rs != 0;
    entry.spec.seed = read_u64(in, "seed");
    const std::uint64_t n = read_u64(in, "example count");
    const std::uint64_t dim = read_u64(in, "feature dim");
    for (std::uint64_t j = 0; j < n; ++j) {
      entry.batch.labels.push_back(static_cast<int>(read_u32(in, "label")));
      std::vector<double> row(dim);
      for (std::uint64_t k = 0; k < dim; ++k) row[k] = read_f64(in, "input");
      entry.batch.inputs.push_back(Tensor::vector(std::move(row)));
    }
    all.push_back(std::move(entry));
  }
  return all;
}

namespace {

struct StageContext {
  ExperimentConfig cfg;
  std::optional<Dataset> dataset;
  std::optional<DeqModel> model;

  std::string dataset_path() const { return cfg.out_dir + "/dataset.bin"; }
  std::string checkpoint_path() const { return cfg.out_dir + "/checkpoint.bin"; }
  std::string history_path() const { return cfg.out_dir + "/history.csv"; }
  std::string attacks_path() const { return cfg.out_dir + "/adversarial.bin"; }
};

const Dataset& need_dataset(StageContext& ctx) {
  if (!ctx.dataset) {
    if (!ctx.cfg.dataset_csv.empty()) {
      const std::size_t dim = 0;
      (void)dim;
      // Domain box for CSV data comes from the config.
      std::ifstream probe(ctx.cfg.dataset_csv);
      std::string first_line;
      std::getline(probe, first_line);
      std::size_t commas =
          static_cast<std::size_t>(std::count(first_line.begin(),
                                              first_line.end(), ','));
      DomainBox box = DomainBox::cube(commas, ctx.cfg.csv_domain_lo,
                                      ctx.cfg.csv_domain_hi);
      ctx.dataset = load_dataset_csv(ctx.cfg.dataset_csv, box, ctx.cfg.seed);
    } else if (std::filesystem::exists(ctx.dataset_path())) {
      ctx.dataset = load_dataset(ctx.dataset_path());
    } else {
      ctx.dataset = gen_dataset(ctx.cfg.dataset_kind, ctx.cfg.dataset_n,
                                ctx.cfg.dataset_noise, ctx.cfg.num_classes,
                                ctx.cfg.seed);
    }
    resolve_budgets(ctx.cfg, *ctx.dataset);
  }
  return *ctx.dataset;
}

const DeqModel& need_model(StageContext& ctx) {
  if (!ctx.model) {
    if (!std::filesystem::exists(ctx.checkpoint_path())) {
      throw IoError("stage needs a checkpoint; run the train stage first (" +
                    ctx.checkpoint_path() + " missing)");
    }
    ctx.model = load_checkpoint(ctx.checkpoint_path()).model;
  }
  return *ctx.model;
}

std::size_t resolve_prediction_state(StageContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  if (cfg.prediction_state == "final") return cfg.solver.iterations;
  if (cfg.prediction_state == "auto") {
    const Dataset& ds = need_dataset(ctx);
    AttackSpec readymade = cfg.attack_base;
    readymade.kind = AttackKind::kReadymadePgd;
    readymade.unroll_steps =
        std::min<std::size_t>(cfg.training.phantom_steps,
                              cfg.solver.iterations);
    readymade.damping = 1.0;
    return early_state_select(need_model(ctx), ds.batch(Split::kVal),
                              ds.domain, readymade, cfg.solver);
  }
  return static_cast<std::size_t>(
      parse_number(cfg.prediction_state, "prediction_state"));
}

void stage_gen_data(StageContext& ctx) {
  const Dataset& ds = need_dataset(ctx);
  save_dataset(ctx.dataset_path(), ds);
  std::cout << "gen-data: " << ds.size() << " examples, "
            << ds.num_classes << " classes, margin "
            << format_double(ds.margin) << "\n";
}

void stage_train(StageContext& ctx) {
  const Dataset& ds = need_dataset(ctx);
  TrainData data{ds.batch(Split::kTrain), ds.batch(Split::kVal), ds.domain};

  std::ofstream history(ctx.history_path());
  if (!history) {
    throw IoError("train: cannot open '" + ctx.history_path() + "'");
  }
  history << "epoch,lr,train_loss,clean_acc,robust_acc\n";
  history.flush();

  const TrainResult result = train_loop(
      data, ctx.cfg.state_dim, ctx.cfg.sigma, ctx.cfg.gamma, ctx.cfg.training,
      ctx.cfg.solver, [&history](const EpochRecord& rec) {
        history << rec.epoch << "," << format_double(rec.lr) << ","
                << format_double(rec.train_loss) << ","
                << format_double(rec.clean_accuracy) << ","
                << format_double(rec.robust_accuracy) << "\n";
        history.flush();
      });

  Checkpoint ckpt;
  ckpt.model = result.model;
  ckpt.train_config_snapshot =
      std::string("framework=") +
      (ctx.cfg.training.framework == Framework::kPgdAt ? "pgd_at" : "trades") +
      " random_intermediate=" +
      (ctx.cfg.training.random_intermediate ? "true" : "false") +
      " epochs=" + std::to_string(ctx.cfg.training.epochs) +
      " seed=" + std::to_string(ctx.cfg.training.seed) +
      " epsilon=" + format_double(ctx.cfg.training.epsilon);
  ckpt.best_validation_meta =
      "best_epoch=" + std::to_string(result.best_epoch) +
      " best_robust_acc=" + format_double(result.best_robust_accuracy);
  save_checkpoint(ctx.checkpoint_path(), ckpt);
  ctx.model = result.model;
  std::cout << "train: best epoch " << result.best_epoch
            << ", validation robust accuracy "
            << format_double(result.best_robust_accuracy) << "\n";
}

void stage_attack(StageContext& ctx) {
  const Dataset& ds = need_dataset(ctx);
  const DeqModel& model = need_model(ctx);
  const LabeledBatch test = ds.batch(Split::kTest);
  const std::size_t prediction_state = resolve_prediction_state(ctx);

  AttackSpec readymade = ctx.cfg.attack_base;
  readymade.kind = AttackKind::kReadymadePgd;
  readymade.unroll_steps = std::min<std::size_t>(
      ctx.cfg.training.phantom_steps, ctx.cfg.solver.iterations);
  readymade.damping = 1.0;
  const AttackResult rm = pgd_attack(model, test, ds.domain, readymade,
                                     ctx.cfg.solver, prediction_state);
  const GridResult grid =
      run_attack_grid(model, test, ds.domain, ctx.cfg.attack_base,
                      ctx.cfg.solver, prediction_state);

  const AttackResult* argmin_cell = nullptr;
  for (const AttackResult& cell : grid.cells) {
    if (cell.spec.state_index == grid.argmin.state_index &&
        cell.spec.unroll_steps == grid.argmin.unroll_steps &&
        cell.spec.damping == grid.argmin.damping) {
      argmin_cell = &cell;
    }
  }

  std::vector<SavedAttack> saved;
  saved.push_back({"readymade", rm.spec, {rm.adversarial, test.labels}});
  if (argmin_cell != nullptr) {
    saved.push_back({"grid_argmin", argmin_cell->spec,
                     {argmin_cell->adversarial, test.labels}});
  }
  save_attacks(ctx.attacks_path(), saved);

  std::cout << "attack: readymade accuracy " << format_double(rm.accuracy)
            << ", grid minimum " << format_double(grid.min_accuracy)
            << " at (i=" << grid.argmin.state_index
            << ", K_a=" << grid.argmin.unroll_steps
            << ", lambda=" << format_double(grid.argmin.damping) << ")\n";
}

void stage_defend(StageContext& ctx) {
  const Dataset& ds = need_dataset(ctx);
  const DeqModel& model = need_model(ctx);
  const std::size_t prediction_state = resolve_prediction_state(ctx);
  if (!std::filesystem::exists(ctx.attacks_path())) {
    throw IoError("defend: '" + ctx.attacks_path() +
                  "' missing; run the attack stage first");
  }
  const std::vector<SavedAttack> saved = load_attacks(ctx.attacks_path());
  for (const SavedAttack& entry : saved) {
    std::size_t failed = 0;
    const double undefended = evaluate_accuracy(
        model, entry.batch.inputs, entry.batch.labels, ctx.cfg.solver,
        prediction_state, &failed);
    const double defended = defended_accuracy(
        model, entry.batch.inputs, entry.batch.labels, ctx.cfg.solver,
        ctx.cfg.defense, ds.domain, prediction_state, &failed);
    std::cout << "defend[" << entry.tag << "]: undefended "
              << format_double(undefended) << ", defended "
              << format_double(defended) << "\n";
  }
}

void stage_report(StageContext& ctx) {
  const Dataset& ds = need_dataset(ctx);
  const DeqModel& model = need_model(ctx);
  EvalConfig eval;
  eval.solver = ctx.cfg.solver;
  eval.attack_base = ctx.cfg.attack_base;
  eval.defense = ctx.cfg.defense;
  eval.prediction_state = resolve_prediction_state(ctx);
  eval.entropy_at_early_state = ctx.cfg.entropy_at_early_state;
  const EvalReport report =
      build_eval_report(model, ds.batch(Split::kTest), ds.domain, eval);
  emit_report(report, ReportPaths::in_dir(ctx.cfg.out_dir));
  std::cout << "report: clean " << format_double(report.clean_accuracy)
            << ", readymade " << format_double(report.readymade_pgd_accuracy)
            << ", grid min " << format_double(report.grid_min_accuracy)
            << ", P " << format_double(report.P) << ", dH "
            << format_double(report.delta_H) << "\n";
}

}  // namespace

int run_experiment(const ExperimentConfig& cfg) {
  return run_experiment(cfg, "");
}

int run_experiment(const ExperimentConfig& cfg, const std::string& only_stage) {
  StageContext ctx{cfg, std::nullopt, std::nullopt};
  std::filesystem::create_directories(cfg.out_dir);
  std::vector<std::string> stages = cfg.stages;
  if (!only_stage.empty()) {
    if (kKnownStages.count(only_stage) == 0) {
      std::cerr << "unknown stage '" << only_stage << "'\n";
      return 2;
    }
    stages = {only_stage};
  }
  for (const std::string& stage : stages) {
    try {
      if (stage == "gen-data") {
        stage_gen_data(ctx);
      } else if (stage == "train") {
        stage_train(ctx);
      } else if (stage == "attack") {
        stage_attack(ctx);
      } else if (stage == "defend") {
        stage_defend(ctx);
      } else if (stage == "report") {
        stage_report(ctx);
      }
    } catch (const std::exception& e) {
      const std::string log_path = cfg.out_dir + "/error.log";
      std::ofstream log(log_path, std::ios::app);
      log << "stage " << stage << " failed: " << e.what() << "\n";
      std::cerr << "stage " << stage << " failed: " << e.what() << "\n";
      return 1;
    }
  }
  return 0;
}

double GradCheckSummary::worst() const {
  return std::max({max_rel_error_unrolled_ce, max_rel_error_entropy_objective,
                   max_rel_error_trades});
}

namespace {

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

double max_rel_err(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, rel_err(a[i], b[i]));
  }
  return worst;
}

// Loss of the unrolled tail recomputed by plain tensor arithmetic, for the
// finite-difference probes.
double tail_ce(const DeqModel& model, const Tensor& anchor, const Tensor& x,
               int label, std::size_t steps) {
  Tensor z = anchor;
  for (std::size_t k = 0; k < steps; ++k) z = layer_apply(model, z, x);
  return cross_entropy(head_apply(model, z), label);
}

double tail_trades(const DeqModel& model, const Tensor& clean_anchor,
                   const Tensor& adv_anchor, const Tensor& x,
                   const Tensor& x_adv, int label, std::size_t steps,
                   double weight) {
  Tensor zc = clean_anchor;
  Tensor za = adv_anchor;
  for (std::size_t k = 0; k < steps; ++k) {
    zc = layer_apply(model, zc, x);
    za = layer_apply(model, za, x_adv);
  }
  const Tensor lc = head_apply(model, zc);
  const Tensor la = head_apply(model, za);
  const Tensor pa = softmax(la);
  const Tensor lpa = log_softmax(la);
  const Tensor lpc = log_softmax(lc);
  double kl = 0.0;
  for (std::size_t i = 0; i < pa.numel(); ++i) kl += pa[i] * (lpa[i] - lpc[i]);
  return cross_entropy(lc, label) + weight * kl;
}

template <typename Loss>
Tensor fd_over_tensor(const Tensor& at, double h, const Loss& loss) {
  return finite_diff_grad([&](const Tensor& probe) { return loss(probe); }, at,
                          h);
}

}  // namespace

GradCheckSummary run_gradcheck(std::size_t instances, std::uint64_t seed) {
  GradCheckSummary summary;
  summary.instances = instances;
  Rng rng(seed);
  const double h = 1e-5;

  for (std::size_t round = 0; round < instances; ++round) {
    const std::size_t l = 2 + rng.uniform_index(7);  // 2..8
    const std::size_t d = 2 + rng.uniform_index(7);
    const std::size_t classes = 2 + rng.uniform_index(7);
    DeqModel model = random_model(l, d, classes, Nonlinearity::kTanh, 0.9, rng);
    Tensor x = Tensor::zeros({l});
    for (std::size_t i = 0; i < l; ++i) x[i] = rng.uniform(-1.5, 1.5);
    Tensor x_adv = x;
    for (std::size_t i = 0; i < l; ++i) x_adv[i] += rng.uniform(-0.1, 0.1);
    const int label = static_cast<int>(rng.uniform_index(classes));
    const std::size_t unroll = 1 + rng.uniform_index(5);  // 1..5

    SolverConfig solver;
    solver.iterations = 6;
    solver.method = SolveMethod::kNaive;
    const DynamicsTrace trace = solve(model, x, solver);
    const std::size_t anchor_state = 1 + rng.uniform_index(solver.iterations);
    const Tensor anchor = trace.states[anchor_state];

    // (a) cross-entropy through the unrolled tail.
    {
      const PhantomGrad pg =
          phantom_grad(model, trace, x, anchor_state, label, unroll);
      auto probe_param = [&](Tensor DeqModel::* member, const Tensor& grad) {
        const Tensor fd =
            fd_over_tensor(model.*member, h, [&](const Tensor& p) {
              DeqModel probe = model;
              probe.*member = p;
              return tail_ce(probe, anchor, x, label, unroll);
            });
        summary.max_rel_error_unrolled_ce =
            std::max(summary.max_rel_error_unrolled_ce, max_rel_err(grad, fd));
      };
      probe_param(&DeqModel::W, pg.w_grad);
      probe_param(&DeqModel::U, pg.u_grad);
      probe_param(&DeqModel::b, pg.b_grad);
      probe_param(&DeqModel::V, pg.v_grad);
      probe_param(&DeqModel::c, pg.c_grad);
      const Tensor fd_x = fd_over_tensor(x, h, [&](const Tensor& p) {
        return tail_ce(model, anchor, p, label, unroll);
      });
      summary.max_rel_error_unrolled_ce = std::max(
          summary.max_rel_error_unrolled_ce, max_rel_err(pg.x_grad, fd_x));
    }

    // (b) input-entropy objective, gradient with respect to the input.
    {
      ExprGraph g;
      const ModelNodes m = add_model_constants(g, model);
      const NodeId xn = g.leaf(x);
      const NodeId z_next = g.constant(anchor);
      const NodeId z_plus =
          unroll_dynamics(g, m, model.sigma, z_next, xn, 1, 1.0);
      const NodeId entropy = entropy_of_logits(g, head_node(g, m, z_plus));
      const Tensor grad = reverse_grad(g, entropy).grad(xn);
      const Tensor fd = fd_over_tensor(x, h, [&](const Tensor& p) {
        return pred_entropy(
            head_apply(model, layer_apply(model, anchor, p)));
      });
      summary.max_rel_error_entropy_objective = std::max(
          summary.max_rel_error_entropy_objective, max_rel_err(grad, fd));
    }

    // (c) TRADES loss, gradients with respect to every parameter.
    {
      const DynamicsTrace adv_trace = solve(model, x_adv, solver);
      const Tensor adv_anchor = adv_trace.states[anchor_state];
      const double weight = 6.0;

      ExprGraph g;
      const ModelNodes m = add_model_leaves(g, model);
      const NodeId xc = g.constant(x);
      const NodeId xa = g.constant(x_adv);
      const NodeId zc = unroll_dynamics(g, m, model.sigma, g.constant(anchor),
                                        xc, unroll, 1.0);
      const NodeId za = unroll_dynamics(
          g, m, model.sigma, g.constant(adv_anchor), xa, unroll, 1.0);
      const NodeId lc = head_node(g, m, zc);
      const NodeId la = head_node(g, m, za);
      const NodeId loss =
          g.add(cross_entropy_of_logits(g, lc, label),
                g.scale(kl_between(g, la, lc), weight));
      const GradResult res = reverse_grad(g, loss);

      auto probe_param = [&](Tensor DeqModel::* member, NodeId leaf) {
        const Tensor fd =
            fd_over_tensor(model.*member, h, [&](const Tensor& p) {
              DeqModel probe = model;
              probe.*member = p;
              return tail_trades(probe, anchor, adv_anchor, x, x_adv, label,
                                 unroll, weight);
            });
        summary.max_rel_error_trades =
            std::max(summary.max_rel_error_trades,
                     max_rel_err(res.grad(leaf), fd));
      };
      probe_param(&DeqModel::W, m.W);
      probe_param(&DeqModel::U, m.U);
      probe_param(&DeqModel::b, m.b);
      probe_param(&DeqModel::V, m.V);
      probe_param(&DeqModel::c, m.c);
    }
  }
  return summary;
}

}  // namespace deqr
