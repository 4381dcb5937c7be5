#include <doctest.h>

#include <cmath>
#include <vector>

#include "npnorm/gevd.hpp"
#include "npnorm/rng.hpp"

using namespace npnorm;

namespace {

// Inverse-CDF sampling; xi == 0 gives the Gumbel limit.
std::vector<double> sample_gevd(double mu, double sigma, double xi, std::size_t n,
                                std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> xs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    if (xi == 0.0)
      xs[i] = mu - sigma * std::log(-std::log(u));
    else
      xs[i] = mu + sigma * (std::pow(-std::log(u), -xi) - 1.0) / xi;
  }
  return xs;
}

}  // namespace

TEST_CASE("cdf at mu in the gumbel limit is exactly exp(-1)") {
  GevdParams p;  // mu 0, sigma 1, xi 0
  CHECK(std::abs(gevd_cdf(0.0, p) - std::exp(-1.0)) < 1e-12);
  p.mu = 3.5;
  p.sigma = 0.7;
  CHECK(std::abs(gevd_cdf(3.5, p) - std::exp(-1.0)) < 1e-12);
}

TEST_CASE("cdf is continuous in xi at zero") {
  for (double a : {-1.5, -0.3, 0.0, 0.4, 1.2, 3.0}) {
    GevdParams limit;  // xi = 0
    for (double xi : {1e-7, -1e-7, 1e-9, -1e-9}) {
      GevdParams p;
      p.xi = xi;
      CHECK(std::abs(gevd_cdf(a, p) - gevd_cdf(a, limit)) < 1e-5);
    }
  }
}

TEST_CASE("cdf respects the support boundary") {
  GevdParams p;
  p.xi = 0.5;  // support [mu - sigma/xi, inf) = [-2, inf)
  CHECK(gevd_cdf(-2.5, p) == 0.0);
  CHECK(gevd_cdf(100.0, p) > 0.999);
  p.xi = -0.5;  // support (-inf, mu - sigma/xi] = (-inf, 2]
  CHECK(gevd_cdf(2.5, p) == 1.0);
}

TEST_CASE("cdf is monotone nondecreasing") {
  for (double xi : {-0.3, 0.0, 0.3}) {
    GevdParams p;
    p.xi = xi;
    double prev = -1.0;
    for (double a = -4.0; a <= 4.0; a += 0.01) {
      const double c = gevd_cdf(a, p);
      CHECK(c >= prev);
      CHECK(c >= 0.0);
      CHECK(c <= 1.0);
      prev = c;
    }
  }
}

TEST_CASE("maximum likelihood fit recovers gumbel parameters") {
  auto xs = sample_gevd(0.0, 1.0, 0.0, 20000, 2024);
  GevdParams p = fit_gevd(xs);
  CHECK(std::abs(p.mu - 0.0) < 0.05);
  CHECK(std::abs(p.sigma - 1.0) < 0.05);
  CHECK(std::abs(p.xi - 0.0) < 0.05);
}

TEST_CASE("maximum likelihood fit recovers a heavy-tailed shape") {
  auto xs = sample_gevd(0.0, 1.0, 0.3, 20000, 2025);
  GevdParams p = fit_gevd(xs);
  CHECK(std::abs(p.mu - 0.0) < 0.05);
  CHECK(std::abs(p.sigma - 1.0) < 0.05);
  CHECK(std::abs(p.xi - 0.3) < 0.05);
}

TEST_CASE("fit rejects degenerate inputs") {
  CHECK_THROWS(fit_gevd(std::vector<double>(5, 1.0)));           // too few
  CHECK_THROWS(fit_gevd(std::vector<double>(50, 2.5)));          // constant
  std::vector<double> with_nan(25, 1.0);
  for (std::size_t i = 0; i < with_nan.size(); ++i) with_nan[i] = static_cast<double>(i);
  with_nan[10] = std::nan("");
  CHECK_THROWS(fit_gevd(with_nan));
}

TEST_CASE("negative log likelihood penalizes out-of-support parameters") {
  auto xs = sample_gevd(0.0, 1.0, 0.3, 100, 7);
  const double ok = gevd_negloglik(xs, 0.0, 1.0, 0.3);
  CHECK(std::isfinite(ok));
  // With xi < 0 and small sigma most samples fall outside the support.
  CHECK(gevd_negloglik(xs, 0.0, 0.01, -2.0) > ok);
}
