#include "npnorm/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace npnorm {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t CohortSpec::n_subjects() const {
  return n_healthy + std::accumulate(n_per_group.begin(), n_per_group.end(),
                                     std::size_t{0});
}

void CohortSpec::validate() const {
  if (grid[0] == 0 || grid[1] == 0 || grid[2] == 0)
    throw std::invalid_argument("CohortSpec: grid extents must be >= 1");
  if (!(noise_std > 0.0))
    throw std::invalid_argument("CohortSpec: noise std must be positive");
  if (covariates == 0) throw std::invalid_argument("CohortSpec: need >= 1 covariate");
  if (deviations.size() > n_per_group.size())
    throw std::invalid_argument("CohortSpec: more deviation specs than patient groups");
  const std::size_t T = n_voxels();
  for (const auto& d : deviations)
    for (std::size_t v : d.region)
      if (v >= T)
        throw std::invalid_argument("CohortSpec: region voxel " + std::to_string(v) +
                                    " outside grid of " + std::to_string(T));
}

namespace {

// Separable isotropic Gaussian blur over the grid, in place.
void gaussian_blur(std::vector<double>& vol, const std::array<std::size_t, 3>& g,
                   double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += kernel[i + radius];
  }
  for (double& k : kernel) k /= ksum;

  const auto [A, B, C] = g;
  std::vector<double> tmp(vol.size());
  auto idx = [&](std::size_t a, std::size_t b, std::size_t c) {
    return (a * B + b) * C + c;
  };
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t ext = axis == 0 ? A : axis == 1 ? B : C;
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0.0;
          double w = 0.0;
          const long pos = axis == 0 ? static_cast<long>(a)
                         : axis == 1 ? static_cast<long>(b)
                                     : static_cast<long>(c);
          for (int k = -radius; k <= radius; ++k) {
            long p = pos + k;
            if (p < 0 || p >= static_cast<long>(ext)) continue;
            const std::size_t up = static_cast<std::size_t>(p);
            s += kernel[k + radius] * (axis == 0 ? vol[idx(up, b, c)]
                                     : axis == 1 ? vol[idx(a, up, c)]
                                                 : vol[idx(a, b, up)]);
            w += kernel[k + radius];
          }
          // Renormalize by the in-range kernel mass so boundary voxels are
          // not attenuated relative to interior ones.
          tmp[idx(a, b, c)] = w > 0.0 ? s / w : 0.0;
        }
    vol.swap(tmp);
  }
}

// First principal component scores of column-centered X, via power
// iteration on X_c^T X_c. Kept private: cohort only needs the scores to
// couple planted deviations to covariates.
std::vector<double> pc1_scores_of(const Tensor& X) {
  const std::size_t N = X.extent(0), D = X.extent(1);
  std::vector<double> mean(D, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) mean[d] += X[n * D + d];
  for (double& m : mean) m /= static_cast<double>(N);

  std::vector<double> v(D, 1.0 / std::sqrt(static_cast<double>(D)));
  std::vector<double> w(D);
  for (int it = 0; it < 1000; ++it) {
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      double proj = 0.0;
      for (std::size_t d = 0; d < D; ++d) proj += (X[n * D + d] - mean[d]) * v[d];
      for (std::size_t d = 0; d < D; ++d) w[d] += proj * (X[n * D + d] - mean[d]);
    }
    double norm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
    if (norm == 0.0) break;
    double diff = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      w[d] /= norm;
      diff += std::abs(w[d] - v[d]);
    }
    v.swap(w);
    if (diff < 1e-12) break;
  }
  std::vector<double> scores(N, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) scores[n] += (X[n * D + d] - mean[d]) * v[d];
  return scores;
}

}  // namespace

CohortSpec default_cohort_spec() {
  CohortSpec s;
  const std::size_t T = s.n_voxels();
  const std::size_t per_region = std::max<std::size_t>(1, T / 20);  // 5% of voxels
  // Disjoint contiguous blocks, one per patient group, spread across the
  // volume so each lands in a different analysis region.
  for (std::size_t g = 0; g < s.n_per_group.size(); ++g) {
    GroupDeviation d;
    const std::size_t start = g * (T / s.n_per_group.size());
    for (std::size_t i = 0; i < per_region; ++i) d.region.push_back(start + i);
    d.offset_in_noise_std = 3.0;
    d.covariate_coupling = 0.3;
    s.deviations.push_back(std::move(d));
  }
  return s;
}

Cohort generate(const CohortSpec& spec) {
  spec.validate();
  const std::size_t N = spec.n_subjects();
  const std::size_t D = spec.covariates;
  const std::size_t T = spec.n_voxels();
  const auto& g = spec.grid;

  Cohort c;
  c.spec = spec;
  c.labels.reserve(N);
  for (std::size_t i = 0; i < spec.n_healthy; ++i) c.labels.push_back(kHealthy);
  for (std::size_t grp = 0; grp < spec.n_per_group.size(); ++grp)
    for (std::size_t i = 0; i < spec.n_per_group[grp]; ++i)
      c.labels.push_back(static_cast<int>(grp) + 1);

  Rng base(spec.seed);

  // Covariates
  Rng rx = base.split(1);
  c.X = Tensor({N, D});
  for (std::size_t i = 0; i < N * D; ++i) c.X[i] = rx.normal();

  // Smooth fixed-effect coefficient volumes
  Rng ra = base.split(2);
  c.A_true = Tensor({D, g[0], g[1], g[2]});
  for (std::size_t d = 0; d < D; ++d) {
    std::vector<double> vol(T);
    for (double& v : vol) v = ra.normal();
    gaussian_blur(vol, g, spec.correlation_length);
    for (std::size_t v = 0; v < T; ++v)
      c.A_true[d * T + v] = spec.fixed_effect_magnitude * vol[v];
  }

  // Low-rank smooth random-effect basis
  Rng rz = base.split(3);
  std::vector<std::vector<double>> basis;
  for (std::size_t r = 0; r < spec.random_effect_rank; ++r) {
    std::vector<double> vol(T);
    for (double& v : vol) v = rz.normal();
    gaussian_blur(vol, g, spec.correlation_length);
    basis.push_back(std::move(vol));
  }

  c.pc1_scores = pc1_scores_of(c.X);

  Rng re = base.split(4);
  c.Y = Tensor({N, g[0], g[1], g[2]});
  for (std::size_t n = 0; n < N; ++n) {
    double* y = c.Y.data() + n * T;
    for (std::size_t d = 0; d < D; ++d) {
      const double xv = c.X[n * D + d];
      const double* a = c.A_true.data() + d * T;
      for (std::size_t v = 0; v < T; ++v) y[v] += xv * a[v];
    }
    for (std::size_t r = 0; r < spec.random_effect_rank; ++r) {
      const double loading = spec.random_effect_scale * re.normal();
      for (std::size_t v = 0; v < T; ++v) y[v] += loading * basis[r][v];
    }
    for (std::size_t v = 0; v < T; ++v) y[v] += spec.noise_std * re.normal();

    const int lab = c.labels[n];
    if (lab != kHealthy && static_cast<std::size_t>(lab - 1) < spec.deviations.size()) {
      const auto& dev = spec.deviations[lab - 1];
      const double delta = dev.offset_in_noise_std * spec.noise_std *
                           (1.0 + dev.covariate_coupling * c.pc1_scores[n]);
      for (std::size_t v : dev.region) y[v] += delta;
    }
  }
  c.planted = spec.deviations;
  return c;
}

Split split(const Cohort& cohort, const SplitProtocol& protocol) {
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < cohort.n_subjects(); ++i)
    by_label[cohort.labels[i]].push_back(i);
  for (const auto& [label, count] : protocol.train_counts) {
    const auto it = by_label.find(label);
    const std::size_t avail = it == by_label.end() ? 0 : it->second.size();
    if (count > avail)
      throw std::invalid_argument("split: protocol wants " + std::to_string(count) +
                                  " of label " + std::to_string(label) + " but only " +
                                  std::to_string(avail) + " available");
  }

  Rng rng = Rng(protocol.seed).split(11);
  Split s;
  std::vector<bool> in_train(cohort.n_subjects(), false);
  for (auto& [label, indices] : by_label) {
    // Fisher-Yates with the shared stream; deterministic given seed.
    for (std::size_t i = indices.size(); i > 1; --i)
      std::swap(indices[i - 1], indices[rng.below(i)]);
    const auto it = protocol.train_counts.find(label);
    const std::size_t take = it == protocol.train_counts.end() ? 0 : it->second;
    for (std::size_t i = 0; i < take; ++i) in_train[indices[i]] = true;
  }
  for (std::size_t i = 0; i < cohort.n_subjects(); ++i)
    (in_train[i] ? s.train : s.test).push_back(i);
  return s;
}

namespace {

json spec_to_json(const CohortSpec& s) {
  json devs = json::array();
  for (const auto& d : s.deviations)
    devs.push_back({{"region", d.region},
                    {"offset_in_noise_std", d.offset_in_noise_std},
                    {"covariate_coupling", d.covariate_coupling}});
  return {{"n_healthy", s.n_healthy},
          {"n_per_group", s.n_per_group},
          {"covariates", s.covariates},
          {"grid", s.grid},
          {"fixed_effect_magnitude", s.fixed_effect_magnitude},
          {"random_effect_scale", s.random_effect_scale},
          {"random_effect_rank", s.random_effect_rank},
          {"correlation_length", s.correlation_length},
          {"noise_std", s.noise_std},
          {"deviations", devs},
          {"seed", s.seed}};
}

CohortSpec spec_from_json(const json& j) {
  CohortSpec s;
  s.n_healthy = j.at("n_healthy").get<std::size_t>();
  s.n_per_group = j.at("n_per_group").get<std::vector<std::size_t>>();
  s.covariates = j.at("covariates").get<std::size_t>();
  s.grid = j.at("grid").get<std::array<std::size_t, 3>>();
  s.fixed_effect_magnitude = j.at("fixed_effect_magnitude").get<double>();
  s.random_effect_scale = j.at("random_effect_scale").get<double>();
  s.random_effect_rank = j.at("random_effect_rank").get<std::size_t>();
  s.correlation_length = j.at("correlation_length").get<double>();
  s.noise_std = j.at("noise_std").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& d : j.at("deviations")) {
    GroupDeviation gd;
    gd.region = d.at("region").get<std::vector<std::size_t>>();
    gd.offset_in_noise_std = d.at("offset_in_noise_std").get<double>();
    gd.covariate_coupling = d.at("covariate_coupling").get<double>();
    s.deviations.push_back(std::move(gd));
  }
  return s;
}

}  // namespace

void save_cohort(const Cohort& cohort, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "truth");
  json meta;
  meta["spec"] = spec_to_json(cohort.spec);
  meta["labels"] = cohort.labels;
  meta["pc1_scores"] = cohort.pc1_scores;
  std::ofstream mf(fs::path(dir) / "meta.json");
  mf << meta.dump(2) << "\n";
  if (!mf) throw std::runtime_error("save_cohort: cannot write meta.json in " + dir);

  save_npnt(cohort.X, (fs::path(dir) / "X.npnt").string());
  save_npnt(cohort.Y, (fs::path(dir) / "Y.npnt").string());
  save_npnt(cohort.A_true, (fs::path(dir) / "truth" / "A_true.npnt").string());
  json masks = json::array();
  for (const auto& d : cohort.planted)
    masks.push_back({{"region", d.region},
                     {"offset_in_noise_std", d.offset_in_noise_std},
                     {"covariate_coupling", d.covariate_coupling}});
  std::ofstream mkf(fs::path(dir) / "truth" / "masks.json");
  mkf << masks.dump(2) << "\n";
}

Cohort load_cohort(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "meta.json");
  if (!mf) throw std::runtime_error("load_cohort: missing meta.json in " + dir);
  json meta = json::parse(mf);

  Cohort c;
  c.spec = spec_from_json(meta.at("spec"));
  c.labels = meta.at("labels").get<std::vector<int>>();
  c.pc1_scores = meta.at("pc1_scores").get<std::vector<double>>();
  c.X = load_npnt((fs::path(dir) / "X.npnt").string());
  c.Y = load_npnt((fs::path(dir) / "Y.npnt").string());
  c.A_true = load_npnt((fs::path(dir) / "truth" / "A_true.npnt").string());
  std::ifstream mkf(fs::path(dir) / "truth" / "masks.json");
  if (mkf) {
    json masks = json::parse(mkf);
    for (const auto& d : masks) {
      GroupDeviation gd;
      gd.region = d.at("region").get<std::vector<std::size_t>>();
      gd.offset_in_noise_std = d.at("offset_in_noise_std").get<double>();
      gd.covariate_coupling = d.at("covariate_coupling").get<double>();
      c.planted.push_back(std::move(gd));
    }
  }
  if (c.labels.size() != c.X.extent(0) || c.labels.size() != c.Y.extent(0))
    throw std::runtime_error("load_cohort: inconsistent subject counts in " + dir);
  return c;
}

}  // namespace npnorm
