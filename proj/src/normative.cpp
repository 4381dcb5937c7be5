#include "npnorm/normative.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace npnorm {

Tensor compute_npm(const Tensor& Y, const PredictiveSummary& pred) {
  if (!Y.same_shape(pred.mean))
    throw std::invalid_argument("compute_npm: Y is " + shape_str(Y.shape()) +
                                ", predictions are " + shape_str(pred.mean.shape()));
  const Tensor total = pred.total();
  Tensor npm(Y.shape());
  for (std::size_t i = 0; i < Y.numel(); ++i) {
    if (!(total[i] > 0.0))
      throw std::invalid_argument("compute_npm: nonpositive total variance");
    npm[i] = (Y[i] - pred.mean[i]) / std::sqrt(total[i]);
  }
  npm.require_finite("npm");
  return npm;
}

SummaryMode summary_mode_from_string(const std::string& s) {
  if (s == "absolute") return SummaryMode::absolute;
  if (s == "signed") return SummaryMode::signed_extreme;
  throw std::invalid_argument("summary mode must be 'absolute' or 'signed', got '" +
                              s + "'");
}

std::string to_string(SummaryMode m) {
  return m == SummaryMode::absolute ? "absolute" : "signed";
}

double summary_statistic(const Tensor& npm_one, double fraction, SummaryMode mode) {
  const std::size_t T = npm_one.numel();
  if (T == 0) throw std::invalid_argument("summary_statistic: empty volume");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("summary_statistic: fraction must be in (0,1]");
  const std::size_t k =
      std::max<std::size_t>(1, static_cast<std::size_t>(
                                   std::ceil(fraction * static_cast<double>(T))));
  std::vector<std::size_t> idx(T);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double fa = std::abs(npm_one[a]), fb = std::abs(npm_one[b]);
                      if (fa != fb) return fa > fb;
                      return a < b;
                    });
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    s += mode == SummaryMode::absolute ? std::abs(npm_one[idx[i]]) : npm_one[idx[i]];
  return s / static_cast<double>(k);
}

std::vector<double> summary_statistics(const Tensor& npm, double fraction,
                                       SummaryMode mode) {
  const std::size_t N = npm.extent(0), T = npm.numel() / npm.extent(0);
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    Tensor one({T}, std::vector<double>(npm.data() + n * T, npm.data() + (n + 1) * T));
    out[n] = summary_statistic(one, fraction, mode);
  }
  return out;
}

NoveltyScores abnormality_probabilities(const std::vector<double>& train_summaries,
                                        const std::vector<double>& test_summaries) {
  NoveltyScores s;
  s.fit = fit_gevd(train_summaries);
  s.summary = test_summaries;
  s.probability.reserve(test_summaries.size());
  for (double a : test_summaries) s.probability.push_back(gevd_cdf(a, s.fit));
  return s;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auc: scores/labels length mismatch");
  double n_pos = 0, n_neg = 0, wins = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw std::invalid_argument("auc: non-finite score");
    if (labels[i] == 1)
      ++n_pos;
    else if (labels[i] == 0)
      ++n_neg;
    else
      throw std::invalid_argument("auc: labels must be 0 or 1");
  }
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("auc: both classes must be present");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / (n_pos * n_neg);
}

// Lentz continued fraction for the regularized incomplete beta, standard
// numerical-recipes form.
namespace {

double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double incomplete_beta_reg(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw std::invalid_argument("incomplete_beta_reg: a,b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                    a * std::log(x) + b * std::log(1.0 - x);
  const double front = std::exp(ln);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double f_test_pvalue(double f, double d1, double d2) {
  if (!(f >= 0.0)) return 1.0;
  // P(F > f) = I_{d2/(d2 + d1 f)}(d2/2, d1/2)
  return incomplete_beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

PrincipalComponent first_principal_component(const DesignMatrix& X) {
  const std::size_t n = X.rows(), d = X.cols();
  if (n < 2) throw std::invalid_argument("first_principal_component: need >= 2 subjects");
  std::vector<double> centered(n * d);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += X.values[i * d + j];
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) centered[i * d + j] = X.values[i * d + j] - m;
  }
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = j; k < d; ++k)
        cov[j * d + k] += centered[i * d + j] * centered[i * d + k];
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = j; k < d; ++k) {
      cov[j * d + k] /= static_cast<double>(n);
      cov[k * d + j] = cov[j * d + k];
    }
  double tr = 0.0;
  for (std::size_t j = 0; j < d; ++j) tr += cov[j * d + j];
  if (!(tr > 0.0))
    throw std::invalid_argument("first_principal_component: zero-variance covariates");

  std::vector<double> v(d, 1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<double> w(d);
  for (int it = 0; it < 10000; ++it) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += cov[j * d + k] * v[k];
      w[j] = s;
    }
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (!(norm > 0.0))
      throw std::invalid_argument("first_principal_component: power iteration collapsed");
    double diff = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      w[j] /= norm;
      diff = std::max(diff, std::abs(std::abs(w[j]) - std::abs(v[j])));
    }
    v = w;
    if (diff < 1e-14) break;
  }
  std::size_t imax = 0;
  for (std::size_t j = 1; j < d; ++j)
    if (std::abs(v[j]) > std::abs(v[imax])) imax = j;
  if (v[imax] < 0.0)
    for (double& x : v) x = -x;

  PrincipalComponent pc;
  pc.direction = v;
  pc.scores.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += centered[i * d + j] * v[j];
    pc.scores[i] = s;
  }
  return pc;
}

RegionAssociation region_association(
    const Tensor& npm, const std::vector<std::vector<std::size_t>>& regions,
    const DesignMatrix& X, double alpha) {
  const std::size_t N = npm.extent(0), T = npm.numel() / npm.extent(0);
  if (X.rows() != N)
    throw std::invalid_argument("region_association: npm has " + std::to_string(N) +
                                " subjects, design has " + std::to_string(X.rows()));
  if (N < 3) throw std::invalid_argument("region_association: need >= 3 subjects");

  const PrincipalComponent pc = first_principal_component(X);
  const std::vector<double>& x = pc.scores;
  const double nx = static_cast<double>(N);
  double xm = std::accumulate(x.begin(), x.end(), 0.0) / nx;
  double sxx = 0.0;
  for (double xi : x) sxx += (xi - xm) * (xi - xm);

  RegionAssociation out;
  out.bonferroni = regions.size();
  out.alpha = alpha;
  for (const auto& region : regions) {
    if (region.empty())
      throw std::invalid_argument("region_association: empty region mask");
    for (std::size_t v : region)
      if (v >= T)
        throw std::invalid_argument("region_association: voxel index " +
                                    std::to_string(v) + " out of range (T = " +
                                    std::to_string(T) + ")");
    std::vector<double> y(N, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t v : region) y[n] += npm[n * T + v];
      y[n] /= static_cast<double>(region.size());
    }
    const double ym = std::accumulate(y.begin(), y.end(), 0.0) / nx;
    double sxy = 0.0, syy = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      sxy += (x[n] - xm) * (y[n] - ym);
      syy += (y[n] - ym) * (y[n] - ym);
    }
    double r2 = 0.0;
    if (syy > 0.0 && sxx > 0.0) r2 = (sxy * sxy) / (sxx * syy);
    r2 = std::min(r2, 1.0);
    const double df = nx - 2.0;
    const double f = r2 >= 1.0 ? std::numeric_limits<double>::infinity()
                               : r2 * df / (1.0 - r2);
    const double p = r2 >= 1.0 ? 0.0 : f_test_pvalue(f, 1.0, df);
    out.r2.push_back(r2);
    out.f_stat.push_back(f);
    out.p_value.push_back(p);
    out.significant.push_back(p * static_cast<double>(out.bonferroni) < alpha ? 1 : 0);
  }
  return out;
}

std::vector<GroupDifferenceMap> group_difference_maps(const Tensor& npm,
                                                      const std::vector<int>& labels) {
  const std::size_t N = npm.extent(0), T = npm.numel() / npm.extent(0);
  if (labels.size() != N)
    throw std::invalid_argument("group_difference_maps: labels length mismatch");
  std::vector<double> healthy(T, 0.0);
  std::size_t n_healthy = 0;
  for (std::size_t n = 0; n < N; ++n)
    if (labels[n] == 0) {
      for (std::size_t v = 0; v < T; ++v) healthy[v] += npm[n * T + v];
      ++n_healthy;
    }
  if (n_healthy == 0)
    throw std::invalid_argument("group_difference_maps: healthy group (label 0) empty");
  for (double& v : healthy) v /= static_cast<double>(n_healthy);

  std::vector<int> groups;
  for (int l : labels)
    if (l != 0 && std::find(groups.begin(), groups.end(), l) == groups.end())
      groups.push_back(l);
  std::sort(groups.begin(), groups.end());

  std::vector<GroupDifferenceMap> out;
  std::vector<std::size_t> trailing(npm.shape().begin() + 1, npm.shape().end());
  for (int g : groups) {
    std::vector<double> mean(T, 0.0);
    std::size_t count = 0;
    for (std::size_t n = 0; n < N; ++n)
      if (labels[n] == g) {
        for (std::size_t v = 0; v < T; ++v) mean[v] += npm[n * T + v];
        ++count;
      }
    if (count == 0) {
      std::cerr << "warning: group " << g << " empty, skipping difference map\n";
      continue;
    }
    Tensor diff(trailing);
    for (std::size_t v = 0; v < T; ++v)
      diff[v] = mean[v] / static_cast<double>(count) - healthy[v];
    out.push_back({g, std::move(diff)});
  }
  return out;
}

}  // namespace npnorm
