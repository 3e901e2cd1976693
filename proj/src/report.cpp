#include "deqr/report.hpp"

#include <charconv>
#include <fstream>

#include "json.hpp"

#include "deqr/errors.hpp"

namespace deqr {

using ordered_json = nlohmann::ordered_json;

ReportPaths ReportPaths::in_dir(const std::string& dir) {
  return {dir + "/report.json", dir + "/report.csv",
          dir + "/entropy_profile.tsv", dir + "/deviation_profile.tsv",
          dir + "/grid_heatmap.tsv"};
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

ordered_json profile_json(const EntropyProfile& p) {
  return ordered_json{
      {"mean", p.mean}, {"q10", p.q10}, {"q50", p.q50}, {"q90", p.q90}};
}

EntropyProfile profile_from_json(const ordered_json& j) {
  EntropyProfile p;
  p.mean = j.at("mean").get<std::vector<double>>();
  p.q10 = j.at("q10").get<std::vector<double>>();
  p.q50 = j.at("q50").get<std::vector<double>>();
  p.q90 = j.at("q90").get<std::vector<double>>();
  return p;
}

ordered_json spec_json(const AttackSpec& s) {
  return ordered_json{{"state_index", s.state_index},
                      {"unroll_steps", s.unroll_steps},
                      {"damping", s.damping}};
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  ordered_json j;
  j["schema_version"] = 1;
  j["clean_accuracy"] = r.clean_accuracy;
  j["readymade_pgd_accuracy"] = r.readymade_pgd_accuracy;
  ordered_json cells = ordered_json::array();
  for (const GridCellStats& c : r.grid_cells) {
    cells.push_back(ordered_json{{"state_index", c.state_index},
                                 {"unroll_steps", c.unroll_steps},
                                 {"damping", c.damping},
                                 {"accuracy", c.accuracy}});
  }
  j["grid"] = ordered_json{{"min_accuracy", r.grid_min_accuracy},
                           {"argmin", spec_json(r.grid_argmin)},
                           {"cells", std::move(cells)}};
  j["per_state_clean_accuracy"] = r.per_state_clean_accuracy;
  j["per_state_robust_accuracy"] = r.per_state_robust_accuracy;
  j["P"] = r.P;
  j["delta_H"] = r.delta_H;
  j["P_over_grid"] = ordered_json{
      {"avg", r.P_over_grid.avg}, {"min", r.P_over_grid.min},
      {"max", r.P_over_grid.max}};
  j["dH_over_grid"] = ordered_json{
      {"avg", r.dH_over_grid.avg}, {"min", r.dH_over_grid.min},
      {"max", r.dH_over_grid.max}};
  j["entropy_profiles"] =
      ordered_json{{"clean", profile_json(r.clean_entropy_profile)},
                   {"readymade", profile_json(r.readymade_entropy_profile)},
                   {"grid_argmin", profile_json(r.grid_argmin_entropy_profile)}};
  j["deviation_profile"] = r.deviation_profile;
  j["failed_solves"] = r.failed_solves;

  ordered_json defense;
  defense["enabled"] = r.defense.enabled;
  if (r.defense.enabled) {
    defense["clean_accuracy"] = r.defense.clean_accuracy;
    defense["readymade_accuracy"] = r.defense.readymade_accuracy;
    defense["grid_min_accuracy"] = r.defense.grid_min_accuracy;
    defense["mean_entropy_undefended"] = r.defense.mean_entropy_undefended;
    defense["mean_entropy_defended"] = r.defense.mean_entropy_defended;
    defense["failed_solves"] = r.defense.failed_solves;
  } else {
    defense["clean_accuracy"] = nullptr;
    defense["readymade_accuracy"] = nullptr;
    defense["grid_min_accuracy"] = nullptr;
    defense["mean_entropy_undefended"] = nullptr;
    defense["mean_entropy_defended"] = nullptr;
    defense["failed_solves"] = nullptr;
  }
  j["defense"] = std::move(defense);
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const std::exception& e) {
    throw IoError(std::string("report_from_json: ") + e.what());
  }
  EvalReport r;
  r.clean_accuracy = j.at("clean_accuracy").get<double>();
  r.readymade_pgd_accuracy = j.at("readymade_pgd_accuracy").get<double>();
  const auto& grid = j.at("grid");
  r.grid_min_accuracy = grid.at("min_accuracy").get<double>();
  r.grid_argmin.kind = AttackKind::kIntermediatePgd;
  r.grid_argmin.state_index = grid.at("argmin").at("state_index").get<std::size_t>();
  r.grid_argmin.unroll_steps =
      grid.at("argmin").at("unroll_steps").get<std::size_t>();
  r.grid_argmin.damping = grid.at("argmin").at("damping").get<double>();
  for (const auto& c : grid.at("cells")) {
    r.grid_cells.push_back({c.at("state_index").get<std::size_t>(),
                            c.at("unroll_steps").get<std::size_t>(),
                            c.at("damping").get<double>(),
                            c.at("accuracy").get<double>()});
  }
  r.per_state_clean_accuracy =
      j.at("per_state_clean_accuracy").get<std::vector<double>>();
  r.per_state_robust_accuracy =
      j.at("per_state_robust_accuracy").get<std::vector<double>>();
  r.P = j.at("P").get<double>();
  r.delta_H = j.at("delta_H").get<double>();
  r.P_over_grid = {j.at("P_over_grid").at("avg").get<double>(),
                   j.at("P_over_grid").at("min").get<double>(),
                   j.at("P_over_grid").at("max").get<double>()};
  r.dH_over_grid = {j.at("dH_over_grid").at("avg").get<double>(),
                    j.at("dH_over_grid").at("min").get<double>(),
                    j.at("dH_over_grid").at("max").get<double>()};
  r.clean_entropy_profile =
      profile_from_json(j.at("entropy_profiles").at("clean"));
  r.readymade_entropy_profile =
      profile_from_json(j.at("entropy_profiles").at("readymade"));
  r.grid_argmin_entropy_profile =
      profile_from_json(j.at("entropy_profiles").at("grid_argmin"));
  r.deviation_profile = j.at("deviation_profile").get<std::vector<double>>();
  r.failed_solves = j.at("failed_solves").get<std::size_t>();
  const auto& defense = j.at("defense");
  r.defense.enabled = defense.at("enabled").get<bool>();
  if (r.defense.enabled) {
    r.defense.clean_accuracy = defense.at("clean_accuracy").get<double>();
    r.defense.readymade_accuracy =
        defense.at("readymade_accuracy").get<double>();
    r.defense.grid_min_accuracy = defense.at("grid_min_accuracy").get<double>();
    r.defense.mean_entropy_undefended =
        defense.at("mean_entropy_undefended").get<double>();
    r.defense.mean_entropy_defended =
        defense.at("mean_entropy_defended").get<double>();
    r.defense.failed_solves = defense.at("failed_solves").get<std::size_t>();
  }
  return r;
}

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("emit_report: cannot open '" + path + "'");
  out << content;
  if (!out) throw IoError("emit_report: write failed for '" + path + "'");
}

}  // namespace

void emit_report(const EvalReport& r, const ReportPaths& paths) {
  write_file(paths.json, report_to_json(r));

  // Flat table, one row per (metric, attack spec) pair.
  std::string csv = "metric,kind,state_index,unroll_steps,damping,value\n";
  auto row = [&csv](const std::string& metric, const std::string& kind,
                    const std::string& state, const std::string& unroll,
                    const std::string& damping, const std::string& value) {
    csv += metric + "," + kind + "," + state + "," + unroll + "," + damping +
           "," + value + "\n";
  };
  row("clean_accuracy", "", "", "", "", format_double(r.clean_accuracy));
  row("readymade_pgd_accuracy", "readymade_pgd", "", "", "",
      format_double(r.readymade_pgd_accuracy));
  for (const GridCellStats& c : r.grid_cells) {
    row("grid_cell_accuracy", "intermediate_pgd", std::to_string(c.state_index),
        std::to_string(c.unroll_steps), format_double(c.damping),
        format_double(c.accuracy));
  }
  row("grid_min_accuracy", "intermediate_pgd",
      std::to_string(r.grid_argmin.state_index),
      std::to_string(r.grid_argmin.unroll_steps),
      format_double(r.grid_argmin.damping), format_double(r.grid_min_accuracy));
  for (std::size_t t = 1; t < r.per_state_clean_accuracy.size(); ++t) {
    row("per_state_clean_accuracy", "", std::to_string(t), "", "",
        format_double(r.per_state_clean_accuracy[t]));
  }
  for (std::size_t t = 1; t < r.per_state_robust_accuracy.size(); ++t) {
    row("per_state_robust_accuracy", "readymade_pgd", std::to_string(t), "", "",
        format_double(r.per_state_robust_accuracy[t]));
  }
  row("P", "intermediate_pgd", std::to_string(r.grid_argmin.state_index),
      std::to_string(r.grid_argmin.unroll_steps),
      format_double(r.grid_argmin.damping), format_double(r.P));
  row("delta_H", "intermediate_pgd", std::to_string(r.grid_argmin.state_index),
      std::to_string(r.grid_argmin.unroll_steps),
      format_double(r.grid_argmin.damping), format_double(r.delta_H));
  row("failed_solves", "", "", "", "",
      std::to_string(r.failed_solves));
  if (r.defense.enabled) {
    row("defense_clean_accuracy", "", "", "", "",
        format_double(r.defense.clean_accuracy));
    row("defense_readymade_accuracy", "readymade_pgd", "", "", "",
        format_double(r.defense.readymade_accuracy));
    row("defense_grid_min_accuracy", "intermediate_pgd", "", "", "",
        format_double(r.defense.grid_min_accuracy));
    row("defense_mean_entropy_undefended", "", "", "", "",
        format_double(r.defense.mean_entropy_undefended));
    row("defense_mean_entropy_defended", "", "", "", "",
        format_double(r.defense.mean_entropy_defended));
  } else {
    row("defense_clean_accuracy", "", "", "", "", "");
    row("defense_readymade_accuracy", "", "", "", "", "");
    row("defense_grid_min_accuracy", "", "", "", "", "");
    row("defense_mean_entropy_undefended", "", "", "", "", "");
    row("defense_mean_entropy_defended", "", "", "", "", "");
  }
  write_file(paths.csv, csv);

  // entropy_profile.tsv: per-state means for clean and strongest-attack
  // inputs; the quantiles describe the strongest-attack distribution.
  std::string ep = "t\tmean_clean\tmean_adv\tq10\tq50\tq90\n";
  const EntropyProfile& clean = r.clean_entropy_profile;
  const EntropyProfile& adv = r.grid_argmin_entropy_profile;
  const std::size_t len = std::min(clean.mean.size(), adv.mean.size());
  for (std::size_t t = 0; t < len; ++t) {
    ep += std::to_string(t) + "\t" + format_double(clean.mean[t]) + "\t" +
          format_double(adv.mean[t]) + "\t" + format_double(adv.q10[t]) +
          "\t" + format_double(adv.q50[t]) + "\t" + format_double(adv.q90[t]) +
          "\n";
  }
  write_file(paths.entropy_profile_tsv, ep);

  std::string dp = "t\tmean_rel_diff\n";
  for (std::size_t t = 0; t < r.deviation_profile.size(); ++t) {
    dp += std::to_string(t) + "\t" + format_double(r.deviation_profile[t]) +
          "\n";
  }
  write_file(paths.deviation_profile_tsv, dp);

  std::string heatmap = "i\tK_a\tlambda\taccuracy\n";
  for (const GridCellStats& c : r.grid_cells) {
    heatmap += std::to_string(c.state_index) + "\t" +
               std::to_string(c.unroll_steps) + "\t" +
               format_double(c.damping) + "\t" + format_double(c.accuracy) +
               "\n";
  }
  write_file(paths.grid_heatmap_tsv, heatmap);
}

}  // namespace deqr
