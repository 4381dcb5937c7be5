#include "npnorm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace npnorm {

namespace fs = std::filesystem;
using nlohmann::json;

SplitProtocol protocol_from_counts(const std::vector<std::size_t>& counts,
                                   std::uint64_t seed) {
  SplitProtocol p;
  p.seed = seed;
  for (std::size_t i = 0; i < counts.size(); ++i)
    p.train_counts[static_cast<int>(i)] = counts[i];
  return p;
}

std::vector<std::vector<std::size_t>> uniform_regions(std::size_t n_voxels,
                                                      std::size_t n_regions) {
  if (n_regions == 0 || n_regions > n_voxels)
    throw std::invalid_argument("uniform_regions: need 1 <= regions <= voxels");
  std::vector<std::vector<std::size_t>> out(n_regions);
  for (std::size_t r = 0; r < n_regions; ++r) {
    const std::size_t lo = r * n_voxels / n_regions;
    const std::size_t hi = (r + 1) * n_voxels / n_regions;
    for (std::size_t v = lo; v < hi; ++v) out[r].push_back(v);
  }
  return out;
}

namespace {

Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& rows) {
  const std::size_t stride = src.numel() / src.extent(0);
  std::vector<std::size_t> shape = src.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(src.data() + rows[i] * stride, src.data() + (rows[i] + 1) * stride,
              out.data() + i * stride);
  return out;
}

}  // namespace

TrainArtifacts run_training(const Cohort& cohort, const RunConfig& config) {
  TrainArtifacts art;
  art.split = split(cohort, protocol_from_counts(config.train_counts, config.seed));

  const Tensor X_tr_raw = gather_rows(cohort.X, art.split.train);
  const Tensor Y_tr_raw = gather_rows(cohort.Y, art.split.train);

  DesignMatrix Xd{X_tr_raw, {}};
  Standardizer st = Standardizer::fit(Xd);
  const DesignMatrix Xs = with_intercept(st.apply(Xd));

  QuantileTransform qt = QuantileTransform::fit(Y_tr_raw);
  const Tensor U_tr = qt.apply(Y_tr_raw);

  Rng base(config.seed);
  art.context = build_context_set(Xs, U_tr, config.context_m, base.split(21));

  NpArchitecture arch = default_architecture(
      config.cohort.grid, Xs.cols(), config.context_m, config.latent_dim);
  arch.dropout = config.dropout;
  art.model = train(Xs.values, U_tr, art.context, arch, config.schedule, base.split(22));
  art.model.set_standardizer(st);
  art.model.set_quantile(std::move(qt));
  return art;
}

std::vector<std::vector<std::size_t>> load_regions(const RunConfig& config,
                                                   std::size_t n_voxels) {
  if (config.region_masks_path.empty())
    return uniform_regions(n_voxels, config.n_regions);
  std::ifstream f(config.region_masks_path);
  if (!f)
    throw std::invalid_argument("cannot read region masks at " +
                                config.region_masks_path);
  json doc = json::parse(f, nullptr, false);
  if (doc.is_discarded() || !doc.is_array())
    throw std::invalid_argument("region masks file must be a JSON list of index lists");
  return doc.get<std::vector<std::vector<std::size_t>>>();
}

EvalResult evaluate_run(const Cohort& cohort, TrainArtifacts& art,
                        const RunConfig& config) {
  EvalResult res;
  res.test_indices = art.split.test;
  for (std::size_t i : art.split.test) res.test_labels.push_back(cohort.labels[i]);

  NpModel& model = art.model;
  const Standardizer& st = model.standardizer();
  const QuantileTransform& qt = model.quantile();

  const Tensor X_tr_raw = gather_rows(cohort.X, art.split.train);
  const Tensor Y_tr_raw = gather_rows(cohort.Y, art.split.train);
  const Tensor X_te_raw = gather_rows(cohort.X, art.split.test);
  const Tensor Y_te_raw = gather_rows(cohort.Y, art.split.test);

  const DesignMatrix Xs_tr = with_intercept(st.apply(DesignMatrix{X_tr_raw, {}}));
  const DesignMatrix Xs_te = with_intercept(st.apply(DesignMatrix{X_te_raw, {}}));
  const Tensor U_tr = qt.apply(Y_tr_raw);
  const Tensor U_te = qt.apply(Y_te_raw);

  Rng base(config.seed);
  PredictiveSummary pred_te = predict_distribution(
      model, Xs_te.values, art.context, config.predict_k, config.predict_l,
      base.split(23));
  res.npm = compute_npm(U_te, pred_te);
  const std::vector<double> sum_te =
      summary_statistics(res.npm, config.top_fraction, config.summary_mode);

  std::vector<double> fit_pop;
  if (config.gevd_population == "train") {
    PredictiveSummary pred_tr = predict_distribution(
        model, Xs_tr.values, art.context, config.predict_k, config.predict_l,
        base.split(24));
    const Tensor npm_tr = compute_npm(U_tr, pred_tr);
    fit_pop = summary_statistics(npm_tr, config.top_fraction, config.summary_mode);
  } else {
    for (std::size_t i = 0; i < sum_te.size(); ++i)
      if (res.test_labels[i] == kHealthy) fit_pop.push_back(sum_te[i]);
  }
  res.scores = abnormality_probabilities(fit_pop, sum_te);

  const BlrPrediction blr = baseline_blr_normative(Xs_tr, U_tr, Xs_te);
  Tensor npm_blr(U_te.shape());
  for (std::size_t i = 0; i < npm_blr.numel(); ++i)
    npm_blr[i] = (U_te[i] - blr.mean[i]) / std::sqrt(blr.variance[i]);
  res.baseline_summary =
      summary_statistics(npm_blr, config.top_fraction, config.summary_mode);

  std::vector<int> groups;
  for (int l : res.test_labels)
    if (l != kHealthy && std::find(groups.begin(), groups.end(), l) == groups.end())
      groups.push_back(l);
  std::sort(groups.begin(), groups.end());

  for (int g : groups) {
    std::vector<double> s_np, s_bl;
    std::vector<int> y;
    for (std::size_t i = 0; i < sum_te.size(); ++i) {
      if (res.test_labels[i] == kHealthy || res.test_labels[i] == g) {
        s_np.push_back(sum_te[i]);
        s_bl.push_back(res.baseline_summary[i]);
        y.push_back(res.test_labels[i] == g ? 1 : 0);
      }
    }
    GroupMetric m;
    m.label = g;
    m.auc_np = auc(s_np, y);
    m.auc_baseline = auc(s_bl, y);
    res.per_group.push_back(m);
  }

  const auto regions = load_regions(config, cohort.spec.n_voxels());
  for (int g : groups) {
    std::vector<std::size_t> rows;
    std::vector<std::size_t> subj;
    for (std::size_t i = 0; i < res.test_labels.size(); ++i)
      if (res.test_labels[i] == g) {
        rows.push_back(i);
        subj.push_back(art.split.test[i]);
      }
    if (rows.size() < 3) continue;
    const Tensor npm_g = gather_rows(res.npm, rows);
    const DesignMatrix X_g{gather_rows(cohort.X, subj), {}};
    res.association.emplace(g, region_association(npm_g, regions, X_g));
  }

  res.difference_maps = group_difference_maps(res.npm, res.test_labels);
  return res;
}

void write_evaluation(const std::string& dir, const EvalResult& result,
                      const RunConfig& config, const std::string& run_id) {
  fs::create_directories(dir);

  std::ofstream metrics(fs::path(dir) / "metrics.csv");
  metrics << "run_id,method,group,M,auc,auc_std\n";
  metrics.precision(17);
  for (const auto& m : result.per_group) {
    metrics << run_id << ",np," << m.label << "," << config.context_m << ","
            << m.auc_np << ",0\n";
    metrics << run_id << ",baseline," << m.label << "," << config.context_m << ","
            << m.auc_baseline << ",0\n";
  }

  std::ofstream scores(fs::path(dir) / "scores.csv");
  scores << "subject_id,label,summary,probability\n";
  scores.precision(17);
  for (std::size_t i = 0; i < result.test_indices.size(); ++i)
    scores << result.test_indices[i] << "," << result.test_labels[i] << ","
           << result.scores.summary[i] << "," << result.scores.probability[i] << "\n";

  json gevd = {{"mu", result.scores.fit.mu},
               {"sigma", result.scores.fit.sigma},
               {"xi", result.scores.fit.xi},
               {"gumbel_fallback", result.scores.fit.gumbel_fallback}};
  std::ofstream gf(fs::path(dir) / "gevd.json");
  gf << gevd.dump(2) << "\n";

  save_npnt(result.npm, (fs::path(dir) / "npm.npnt").string());
  for (const auto& d : result.difference_maps)
    save_npnt(d.difference,
              (fs::path(dir) / ("diff_group" + std::to_string(d.label) + ".npnt")).string());

  json assoc = json::object();
  for (const auto& [g, a] : result.association) {
    json rows = json::array();
    for (std::size_t r = 0; r < a.r2.size(); ++r)
      rows.push_back({{"region", r},
                      {"r2", a.r2[r]},
                      {"f", a.f_stat[r]},
                      {"p", a.p_value[r]},
                      {"significant", a.significant[r] != 0}});
    assoc[std::to_string(g)] = {{"bonferroni", a.bonferroni},
                                {"alpha", a.alpha},
                                {"regions", rows}};
  }
  std::ofstream af(fs::path(dir) / "association.json");
  af << assoc.dump(2) << "\n";
}

}  // namespace npnorm
