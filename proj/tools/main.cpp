#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "npnorm/config.hpp"
#include "npnorm/pipeline.hpp"
#include "npnorm/report.hpp"

namespace fs = std::filesystem;
using namespace npnorm;

// Exit codes: 1 internal, 2 bad input/path, 3 config validation,
// 4 numeric failure.
namespace {

constexpr int kExitInternal = 1;
constexpr int kExitBadInput = 2;
constexpr int kExitConfig = 3;
constexpr int kExitNumeric = 4;

struct GlobalOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_override;
  std::uint64_t seed_override = 0;
  bool seed_set = false;
  std::size_t repeats = 1;
  bool dump_config = false;
};

RunConfig resolve_config(const GlobalOpts& g) {
  std::vector<std::string> overrides = g.sets;
  if (g.seed_set) overrides.push_back("seed=" + std::to_string(g.seed_override));
  if (!g.out_override.empty()) overrides.push_back("out=" + g.out_override);
  return load_config(g.config_path, overrides);
}

Cohort obtain_cohort(const RunConfig& cfg) {
  const std::string dir =
      cfg.cohort_path.empty() ? (fs::path(cfg.out) / "cohort").string() : cfg.cohort_path;
  if (!fs::exists(dir))
    throw std::ifstream::failure("cohort directory not found: " + dir);
  return load_cohort(dir);
}

int cmd_generate(const RunConfig& cfg) {
  Cohort cohort = generate(cfg.cohort);
  if (cfg.cohort.n_voxels() > 20000)
    std::cerr << "warning: grid has " << cfg.cohort.n_voxels()
              << " voxels; generation and training will be slow\n";
  const std::string dir = (fs::path(cfg.out) / "cohort").string();
  save_cohort(cohort, dir);
  std::vector<std::size_t> counts;
  for (int l : cohort.labels) {
    if (counts.size() <= static_cast<std::size_t>(l)) counts.resize(l + 1, 0);
    ++counts[l];
  }
  std::cout << "wrote " << dir << ": " << cohort.n_subjects() << " subjects (";
  for (std::size_t i = 0; i < counts.size(); ++i)
    std::cout << (i ? "/" : "") << counts[i];
  std::cout << "), grid " << cfg.cohort.grid[0] << "x" << cfg.cohort.grid[1] << "x"
            << cfg.cohort.grid[2] << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  Cohort cohort = obtain_cohort(cfg);
  TrainArtifacts art = run_training(cohort, cfg);
  const std::string mdir = (fs::path(cfg.out) / "model").string();
  save_model(art.model, mdir);
  save_fixed_effect_set(art.context, (fs::path(cfg.out) / "context").string());
  const auto& log = art.model.train_log();
  std::cout << "trained " << cfg.schedule.epochs << " epochs, loss "
            << log.front().loss << " -> " << log.back().loss << ", wrote " << mdir
            << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, std::size_t repeats) {
  Cohort cohort = obtain_cohort(cfg);
  struct Cell {
    std::vector<double> np, baseline;
  };
  std::map<int, Cell> cells;
  EvalResult first;
  RunConfig rcfg = cfg;
  for (std::size_t r = 0; r < repeats; ++r) {
    rcfg.seed = cfg.seed + r;
    TrainArtifacts art = run_training(cohort, rcfg);
    EvalResult res = evaluate_run(cohort, art, rcfg);
    for (const auto& m : res.per_group) {
      cells[m.label].np.push_back(m.auc_np);
      cells[m.label].baseline.push_back(m.auc_baseline);
    }
    if (r == 0) first = std::move(res);
  }

  const std::string edir = (fs::path(cfg.out) / "eval").string();
  write_evaluation(edir, first, cfg, "seed" + std::to_string(cfg.seed));
  if (repeats > 1) {
    auto stats = [](const std::vector<double>& v) {
      double m = 0.0;
      for (double x : v) m += x;
      m /= v.size();
      double var = 0.0;
      for (double x : v) var += (x - m) * (x - m);
      return std::pair<double, double>(m, std::sqrt(var / v.size()));
    };
    std::ofstream metrics(fs::path(edir) / "metrics.csv");
    metrics << "run_id,method,group,M,auc,auc_std\n";
    metrics.precision(17);
    const std::string rid = "seed" + std::to_string(cfg.seed) + "x" +
                            std::to_string(repeats);
    for (const auto& [g, cell] : cells) {
      const auto [mn, sn] = stats(cell.np);
      const auto [mb, sb] = stats(cell.baseline);
      metrics << rid << ",np," << g << "," << cfg.context_m << "," << mn << "," << sn
              << "\n";
      metrics << rid << ",baseline," << g << "," << cfg.context_m << "," << mb << ","
              << sb << "\n";
    }
  }
  std::cout << "wrote " << edir << "\n";
  for (const auto& [g, cell] : cells) {
    double m = 0.0;
    for (double x : cell.np) m += x;
    std::cout << "group " << g << ": np auc " << m / cell.np.size() << " ("
              << repeats << " run" << (repeats > 1 ? "s" : "") << ")\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep normative modeling of volumetric measurements"};
  app.require_subcommand(0, 1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "JSON config file");
  app.add_option("--set", g.sets, "dotted override KEY=VALUE")->take_all();
  app.add_option("--seed", g.seed_override, "seed override")
      ->each([&g](const std::string&) { g.seed_set = true; });
  app.add_option("--out", g.out_override, "output directory override");
  app.add_option("--repeats", g.repeats, "repeat train+evaluate with seed+r")
      ->check(CLI::PositiveNumber);
  app.add_flag("--dump-config", g.dump_config, "print effective config and exit");

  auto* sub_generate = app.add_subcommand("generate", "write a synthetic cohort");
  auto* sub_train = app.add_subcommand("train", "fit the model on a cohort");
  auto* sub_evaluate = app.add_subcommand("evaluate", "score test subjects");
  auto* sub_report = app.add_subcommand("report", "aggregate evaluated runs");
  for (auto* s : {sub_generate, sub_train, sub_evaluate, sub_report})
    s->fallthrough();
  std::vector<std::string> run_dirs;
  sub_report->add_option("dirs", run_dirs, "evaluated run directories")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = resolve_config(g);
    if (g.dump_config) {
      std::cout << config_to_json(cfg).dump(2) << "\n";
      if (app.get_subcommands().empty()) return 0;
    }
    if (sub_generate->parsed()) return cmd_generate(cfg);
    if (sub_train->parsed()) return cmd_train(cfg);
    if (sub_evaluate->parsed()) return cmd_evaluate(cfg, g.repeats);
    if (sub_report->parsed()) {
      write_report((fs::path(cfg.out) / "report").string(), run_dirs);
      std::cout << "wrote " << (fs::path(cfg.out) / "report").string() << "\n";
      return 0;
    }
    if (!g.dump_config) std::cerr << app.help();
    return 0;
  } catch (const std::ifstream::failure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    std::cerr << "error: " << what << "\n";
    if (what.rfind("config", 0) == 0 || what.rfind("--set", 0) == 0) return kExitConfig;
    return kExitBadInput;
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    std::cerr << "error: " << what << "\n";
    if (what.find("non-finite") != std::string::npos ||
        what.find("gevd") != std::string::npos ||
        what.find("fit_gevd") != std::string::npos)
      return kExitNumeric;
    return kExitInternal;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInternal;
  }
}
