#pragma once

#include <string>
#include <vector>

namespace npnorm {

struct MetricsRow {
  std::string run_id;
  std::string method;
  int group = 0;
  std::size_t m = 0;
  double auc = 0.0;
  double auc_std = 0.0;
};

std::vector<MetricsRow> read_metrics_csv(const std::string& path);

struct AggregateRow {
  std::string method;
  int group = 0;
  std::size_t m = 0;
  std::size_t n_runs = 0;
  double auc_mean = 0.0;
  double auc_std = 0.0;  // population std over runs
};

std::vector<AggregateRow> aggregate_metrics(const std::vector<MetricsRow>& rows);

// Self-contained grouped bar chart, one cluster per (method, M), one bar
// per diagnostic group.
std::string render_bar_chart_svg(const std::vector<AggregateRow>& agg);

// Reads metrics.csv from each run directory, writes summary.csv and
// report.svg into out_dir. Throws listing the offending files when a
// metrics file is missing or malformed.
void write_report(const std::string& out_dir,
                  const std::vector<std::string>& run_dirs);

}  // namespace npnorm
