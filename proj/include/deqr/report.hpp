#pragma once

#include <string>

#include "deqr/metrics.hpp"

namespace deqr {

struct ReportPaths {
  std::string json;
  std::string csv;
  std::string entropy_profile_tsv;
  std::string deviation_profile_tsv;
  std::string grid_heatmap_tsv;

  static ReportPaths in_dir(const std::string& dir);
};

// Shortest representation that parses back to the same double.
std::string format_double(double v);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& json_text);

// JSON document, flat CSV (one row per metric / attack-spec pair), and the
// three tab-separated plot-data tables. In entropy_profile.tsv the mean_adv
// and quantile columns describe the dynamics under the strongest grid attack;
// mean_clean is the clean-input profile.
void emit_report(const EvalReport& report, const ReportPaths& paths);

}  // namespace deqr
