#include "npnorm/gevd.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace npnorm {

namespace {
constexpr double kXiTiny = 1e-9;
constexpr double kEulerGamma = 0.5772;
constexpr double kInf = std::numeric_limits<double>::infinity();
}  // namespace

double gevd_cdf(double a, const GevdParams& p) {
  if (!(p.sigma > 0.0)) throw std::invalid_argument("gevd_cdf: sigma must be > 0");
  const double t = (a - p.mu) / p.sigma;
  if (std::abs(p.xi) < kXiTiny) return std::exp(-std::exp(-t));
  const double u = 1.0 + p.xi * t;
  if (u <= 0.0) return p.xi > 0.0 ? 0.0 : 1.0;
  return std::exp(-std::pow(u, -1.0 / p.xi));
}

double gevd_logpdf(double a, const GevdParams& p) {
  if (!(p.sigma > 0.0)) throw std::invalid_argument("gevd_logpdf: sigma must be > 0");
  const double t = (a - p.mu) / p.sigma;
  if (std::abs(p.xi) < kXiTiny) {
    return -std::log(p.sigma) - t - std::exp(-t);
  }
  const double u = 1.0 + p.xi * t;
  if (u <= 0.0) return -kInf;
  const double lu = std::log(u);
  return -std::log(p.sigma) - (1.0 + 1.0 / p.xi) * lu - std::exp(-lu / p.xi);
}

double gevd_negloglik(const std::vector<double>& a, double mu, double sigma,
                      double xi) {
  if (!(sigma > 0.0)) return kInf;
  GevdParams p{mu, sigma, xi, false};
  double nll = 0.0;
  for (double x : a) {
    const double lp = gevd_logpdf(x, p);
    if (!std::isfinite(lp)) return kInf;
    nll -= lp;
  }
  return nll;
}

namespace {

struct Simplex {
  // Nelder-Mead over theta = (mu, log sigma, xi).
  static double eval(const std::vector<double>& a, const std::array<double, 3>& th) {
    return gevd_negloglik(a, th[0], std::exp(th[1]), th[2]);
  }
};

}  // namespace

GevdParams fit_gevd(const std::vector<double>& a) {
  if (a.size() < 20) throw std::invalid_argument("fit_gevd: need at least 20 samples");
  for (double x : a)
    if (!std::isfinite(x)) throw std::invalid_argument("fit_gevd: non-finite sample");

  const double n = static_cast<double>(a.size());
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double var = 0.0;
  for (double x : a) var += (x - mean) * (x - mean);
  var /= n;
  const double sd = std::sqrt(var);
  if (!(sd > 0.0)) throw std::invalid_argument("fit_gevd: degenerate (constant) sample");

  const double sigma0 = sd * std::sqrt(6.0) / 3.141592653589793;
  const double mu0 = mean - kEulerGamma * sigma0;

  GevdParams moment{mu0, sigma0, 0.0, true};
  const double nll_moment = gevd_negloglik(a, mu0, sigma0, 0.0);

  using Theta = std::array<double, 3>;
  Theta x0{mu0, std::log(sigma0), 0.1};
  std::array<Theta, 4> vx;
  std::array<double, 4> vf;
  const std::array<double, 3> step{0.1 * sigma0, 0.2, 0.1};
  vx[0] = x0;
  for (int i = 1; i < 4; ++i) {
    vx[i] = x0;
    vx[i][i - 1] += step[i - 1];
  }
  for (int i = 0; i < 4; ++i) vf[i] = Simplex::eval(a, vx[i]);

  const double alpha = 1.0, gamma = 2.0, rho = 0.5, shrink = 0.5;
  for (int it = 0; it < 500; ++it) {
    std::array<int, 4> ord{0, 1, 2, 3};
    std::sort(ord.begin(), ord.end(), [&](int p, int q) { return vf[p] < vf[q]; });
    std::array<Theta, 4> sx;
    std::array<double, 4> sf;
    for (int i = 0; i < 4; ++i) {
      sx[i] = vx[ord[i]];
      sf[i] = vf[ord[i]];
    }
    vx = sx;
    vf = sf;
    if (std::isfinite(vf[0]) && (vf[3] - vf[0] < 1e-10 * (1.0 + std::abs(vf[0]))))
      break;

    Theta cen{};
    for (int i = 0; i < 3; ++i)
      for (int d = 0; d < 3; ++d) cen[d] += vx[i][d] / 3.0;

    auto blend = [&](double c) {
      Theta t;
      for (int d = 0; d < 3; ++d) t[d] = cen[d] + c * (cen[d] - vx[3][d]);
      return t;
    };
    Theta xr = blend(alpha);
    double fr = Simplex::eval(a, xr);
    if (fr < vf[0]) {
      Theta xe = blend(gamma);
      double fe = Simplex::eval(a, xe);
      if (fe < fr) {
        vx[3] = xe;
        vf[3] = fe;
      } else {
        vx[3] = xr;
        vf[3] = fr;
      }
    } else if (fr < vf[2]) {
      vx[3] = xr;
      vf[3] = fr;
    } else {
      Theta xc = blend(-rho);
      double fc = Simplex::eval(a, xc);
      if (fc < vf[3]) {
        vx[3] = xc;
        vf[3] = fc;
      } else {
        for (int i = 1; i < 4; ++i) {
          for (int d = 0; d < 3; ++d)
            vx[i][d] = vx[0][d] + shrink * (vx[i][d] - vx[0][d]);
          vf[i] = Simplex::eval(a, vx[i]);
        }
      }
    }
  }

  int best = 0;
  for (int i = 1; i < 4; ++i)
    if (vf[i] < vf[best]) best = i;
  if (!std::isfinite(vf[best]) || vf[best] > nll_moment ||
      std::abs(vx[best][2]) >= 5.0)
    return moment;

  GevdParams out;
  out.mu = vx[best][0];
  out.sigma = std::exp(vx[best][1]);
  out.xi = vx[best][2];
  out.gumbel_fallback = false;
  return out;
}

}  // namespace npnorm
