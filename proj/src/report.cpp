#include "npnorm/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace npnorm {

namespace fs = std::filesystem;

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot read metrics file " + path);
  std::string line;
  if (!std::getline(f, line) || line != "run_id,method,group,M,auc,auc_std")
    throw std::invalid_argument("unexpected metrics header in " + path);
  std::vector<MetricsRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    MetricsRow r;
    std::string field;
    try {
      std::getline(ss, r.run_id, ',');
      std::getline(ss, r.method, ',');
      std::getline(ss, field, ',');
      r.group = std::stoi(field);
      std::getline(ss, field, ',');
      r.m = static_cast<std::size_t>(std::stoul(field));
      std::getline(ss, field, ',');
      r.auc = std::stod(field);
      std::getline(ss, field, ',');
      r.auc_std = std::stod(field);
    } catch (const std::exception&) {
      throw std::invalid_argument("malformed metrics row in " + path + ": " + line);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<AggregateRow> aggregate_metrics(const std::vector<MetricsRow>& rows) {
  std::map<std::tuple<std::string, int, std::size_t>, std::vector<double>> cells;
  for (const auto& r : rows) cells[{r.method, r.group, r.m}].push_back(r.auc);
  std::vector<AggregateRow> out;
  for (const auto& [key, vals] : cells) {
    AggregateRow a;
    a.method = std::get<0>(key);
    a.group = std::get<1>(key);
    a.m = std::get<2>(key);
    a.n_runs = vals.size();
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    a.auc_mean = mean;
    a.auc_std = std::sqrt(var / static_cast<double>(vals.size()));
    out.push_back(a);
  }
  return out;
}

std::string render_bar_chart_svg(const std::vector<AggregateRow>& agg) {
  if (agg.empty()) throw std::invalid_argument("render_bar_chart_svg: no rows");
  std::vector<std::pair<std::string, std::size_t>> clusters;
  std::vector<int> groups;
  for (const auto& a : agg) {
    std::pair<std::string, std::size_t> c{a.method, a.m};
    if (std::find(clusters.begin(), clusters.end(), c) == clusters.end())
      clusters.push_back(c);
    if (std::find(groups.begin(), groups.end(), a.group) == groups.end())
      groups.push_back(a.group);
  }
  std::sort(clusters.begin(), clusters.end());
  std::sort(groups.begin(), groups.end());

  const char* palette[] = {"#4878a8", "#e49444", "#d1605e", "#85b6b2",
                           "#6a9f58", "#e7ca60"};
  const double bar_w = 26, gap = 10, cluster_gap = 34;
  const double plot_h = 260, margin_l = 56, margin_t = 30, margin_b = 70;
  const double cluster_w = groups.size() * (bar_w + gap) + cluster_gap;
  const double width = margin_l + clusters.size() * cluster_w + 120;
  const double height = margin_t + plot_h + margin_b;

  auto lookup = [&](const std::pair<std::string, std::size_t>& c, int g)
      -> const AggregateRow* {
    for (const auto& a : agg)
      if (a.method == c.first && a.m == c.second && a.group == g) return &a;
    return nullptr;
  };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " " << height
      << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int tick = 0; tick <= 10; tick += 2) {
    const double v = tick / 10.0;
    const double y = margin_t + plot_h * (1.0 - v);
    svg << "<line x1=\"" << margin_l << "\" y1=\"" << y << "\" x2=\""
        << width - 100 << "\" y2=\"" << y
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n"
        << "<text x=\"" << margin_l - 8 << "\" y=\"" << y + 4
        << "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">"
        << v << "</text>\n";
  }
  svg << "<text x=\"14\" y=\"" << margin_t + plot_h / 2
      << "\" font-size=\"12\" font-family=\"sans-serif\" transform=\"rotate(-90 14 "
      << margin_t + plot_h / 2 << ")\" text-anchor=\"middle\">AUC</text>\n";

  for (std::size_t ci = 0; ci < clusters.size(); ++ci) {
    const double x0 = margin_l + ci * cluster_w + cluster_gap / 2;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const AggregateRow* a = lookup(clusters[ci], groups[gi]);
      if (!a) continue;
      const double h = plot_h * std::clamp(a->auc_mean, 0.0, 1.0);
      const double x = x0 + gi * (bar_w + gap);
      const double y = margin_t + plot_h - h;
      svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w
          << "\" height=\"" << h << "\" fill=\"" << palette[gi % 6] << "\"/>\n";
      if (a->auc_std > 0.0) {
        const double e = plot_h * a->auc_std;
        const double cx = x + bar_w / 2;
        svg << "<line x1=\"" << cx << "\" y1=\"" << y - e << "\" x2=\"" << cx
            << "\" y2=\"" << std::min(y + e, margin_t + plot_h)
            << "\" stroke=\"#333333\" stroke-width=\"1.5\"/>\n";
      }
    }
    svg << "<text x=\"" << x0 + (groups.size() * (bar_w + gap) - gap) / 2
        << "\" y=\"" << margin_t + plot_h + 18
        << "\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">"
        << clusters[ci].first << " M=" << clusters[ci].second << "</text>\n";
  }
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const double ly = margin_t + 16 + gi * 18;
    svg << "<rect x=\"" << width - 92 << "\" y=\"" << ly - 10
        << "\" width=\"12\" height=\"12\" fill=\"" << palette[gi % 6] << "\"/>\n"
        << "<text x=\"" << width - 76 << "\" y=\"" << ly
        << "\" font-size=\"11\" font-family=\"sans-serif\">group " << groups[gi]
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void write_report(const std::string& out_dir,
                  const std::vector<std::string>& run_dirs) {
  if (run_dirs.empty()) throw std::invalid_argument("write_report: no run directories");
  std::vector<MetricsRow> rows;
  std::vector<std::string> bad;
  for (const auto& d : run_dirs) {
    const std::string path = (fs::path(d) / "metrics.csv").string();
    try {
      auto r = read_metrics_csv(path);
      rows.insert(rows.end(), r.begin(), r.end());
    } catch (const std::exception& e) {
      bad.push_back(std::string(e.what()));
    }
  }
  if (!bad.empty()) {
    std::string msg = "write_report: bad metrics files:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw std::invalid_argument(msg);
  }

  const auto agg = aggregate_metrics(rows);
  fs::create_directories(out_dir);
  std::ofstream csv(fs::path(out_dir) / "summary.csv");
  csv << "method,group,M,n_runs,auc_mean,auc_std\n";
  csv.precision(17);
  for (const auto& a : agg)
    csv << a.method << "," << a.group << "," << a.m << "," << a.n_runs << ","
        << a.auc_mean << "," << a.auc_std << "\n";

  std::ofstream svg(fs::path(out_dir) / "report.svg");
  svg << render_bar_chart_svg(agg);
}

}  // namespace npnorm
