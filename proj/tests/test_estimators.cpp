#include <doctest.h>

#include <cmath>
#include <vector>

#include "npnorm/linalg.hpp"
#include "npnorm/normative.hpp"
#include "npnorm/np_model.hpp"
#include "npnorm/rng.hpp"
#include "oracles.hpp"

using namespace npnorm;
using namespace npnorm::testing;

TEST_CASE("lstsq agrees with the normal equations on well-conditioned systems") {
  Rng rng(21);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 12 + rng.below(20), d = 2 + rng.below(4);
    std::vector<double> X(n * d), y(n);
    for (auto& v : X) v = rng.normal();
    for (auto& v : y) v = rng.normal();
    LstsqResult r = lstsq(X, n, d, y);
    std::vector<double> ref = normal_equations(X, n, d, y);
    REQUIRE(r.coeffs.size() == d);
    CHECK(!r.rank_deficient);
    for (std::size_t j = 0; j < d; ++j)
      CHECK(std::abs(r.coeffs[j] - ref[j]) < 1e-10);
  }
}

TEST_CASE("lstsq flags rank deficiency and stays finite") {
  const std::size_t n = 10, d = 3;
  std::vector<double> X(n * d), y(n);
  Rng rng(4);
  for (std::size_t i = 0; i < n; ++i) {
    X[i * d] = rng.normal();
    X[i * d + 1] = 2.0 * X[i * d];  // exact collinearity
    X[i * d + 2] = rng.normal();
    y[i] = rng.normal();
  }
  LstsqResult r = lstsq(X, n, d, y);
  CHECK(r.rank_deficient);
  for (double c : r.coeffs) CHECK(std::isfinite(c));
}

TEST_CASE("diagonal gaussian KL agrees with numerical quadrature") {
  Rng rng(31);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t q = 1 + rng.below(4);
    LatentGaussian a, b;
    a.mean = Tensor({1, q});
    a.std = Tensor({1, q});
    b.mean = Tensor({1, q});
    b.std = Tensor({1, q});
    double ref = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
      a.mean[i] = rng.uniform(-2.0, 2.0);
      a.std[i] = rng.uniform(0.3, 2.0);
      b.mean[i] = rng.uniform(-2.0, 2.0);
      b.std[i] = rng.uniform(0.3, 2.0);
      ref += kl_gaussian_quadrature(a.mean[i], a.std[i], b.mean[i], b.std[i]);
    }
    CHECK(std::abs(kl_diag_gaussian_sum(a, b) - ref) < 1e-6);
  }
}

TEST_CASE("KL is zero between identical gaussians and positive otherwise") {
  LatentGaussian a;
  a.mean = Tensor({1, 3}, {0.5, -1.0, 2.0});
  a.std = Tensor({1, 3}, {1.0, 0.5, 2.0});
  CHECK(kl_diag_gaussian_sum(a, a) == doctest::Approx(0.0).epsilon(1e-12));
  LatentGaussian b = a;
  b.mean[0] += 1.0;
  CHECK(kl_diag_gaussian_sum(a, b) > 0.0);
}

TEST_CASE("auc agrees with exhaustive pair counting, ties included") {
  Rng rng(55);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 8 + rng.below(30);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    bool has0 = false, has1 = false;
    for (std::size_t i = 0; i < n; ++i) {
      // Quantized scores force ties across and within classes.
      scores[i] = std::floor(rng.uniform(0.0, 6.0)) / 2.0;
      labels[i] = rng.uniform() < 0.4 ? 1 : 0;
      (labels[i] ? has1 : has0) = true;
    }
    if (!has0 || !has1) continue;
    CHECK(auc(scores, labels) == auc_pair_counting(scores, labels));
  }
  CHECK_THROWS(auc({1.0, 2.0}, {1, 1}));
}

TEST_CASE("top-fraction summary agrees with a full sort") {
  Rng rng(66);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t T = 30 + rng.below(200);
    Tensor z({1, T});
    std::vector<double> zs(T);
    for (std::size_t i = 0; i < T; ++i) {
      // Half-integer values create |z| ties that must break identically.
      zs[i] = std::floor(rng.uniform(-8.0, 8.0)) / 2.0;
      z[i] = zs[i];
    }
    const double frac = rng.uniform(0.005, 0.3);
    CHECK(summary_statistic(z, frac, SummaryMode::absolute) ==
          summary_full_sort(zs, frac, false));
    CHECK(summary_statistic(z, frac, SummaryMode::signed_extreme) ==
          summary_full_sort(zs, frac, true));
  }
}

TEST_CASE("region association r2 matches the closed form") {
  Rng rng(77);
  const std::size_t n = 24, T = 40;
  Tensor npm({n, T, 1, 1});
  DesignMatrix X;
  X.values = Tensor({n, 3});
  X.columns = {"c0", "c1", "c2"};
  for (std::size_t i = 0; i < npm.numel(); ++i) npm[i] = rng.normal();
  for (std::size_t i = 0; i < X.values.numel(); ++i) X.values[i] = rng.normal();

  std::vector<std::vector<std::size_t>> regions = {{0, 1, 2, 3}, {10, 11}, {20, 21, 22}};
  RegionAssociation assoc = region_association(npm, regions, X);

  PrincipalComponent pc = first_principal_component(X);
  for (std::size_t rgn = 0; rgn < regions.size(); ++rgn) {
    std::vector<double> means(n, 0.0);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t v : regions[rgn])
        means[s] += npm[s * T + v] / static_cast<double>(regions[rgn].size());
    const double r2 = r2_closed_form(pc.scores, means);
    CHECK(std::abs(assoc.r2[rgn] - r2) < 1e-8);
    const double f = r2 * static_cast<double>(n - 2) / (1.0 - r2);
    CHECK(assoc.f_stat[rgn] == doctest::Approx(f).epsilon(1e-10));
  }
  CHECK(assoc.bonferroni == regions.size());
}

TEST_CASE("first principal component matches a jacobi eigendecomposition") {
  Rng rng(88);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t n = 30, d = 2 + rng.below(4);
    DesignMatrix X;
    X.values = Tensor({n, d});
    for (std::size_t j = 0; j < d; ++j) X.columns.push_back("c" + std::to_string(j));
    for (std::size_t i = 0; i < X.values.numel(); ++i) X.values[i] = rng.normal();

    PrincipalComponent pc = first_principal_component(X);

    // Column-centered covariance, then Jacobi.
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += X.values[i * d + j] / n;
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b)
          cov[a * d + b] += (X.values[i * d + a] - mean[a]) *
                            (X.values[i * d + b] - mean[b]) / n;
    std::vector<double> v = leading_eigenvector_jacobi(cov, d);
    // Match the production sign convention.
    std::size_t big = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(v[j]) > std::abs(v[big])) big = j;
    if (v[big] < 0)
      for (double& x : v) x = -x;
    REQUIRE(pc.direction.size() == d);
    for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(pc.direction[j] - v[j]) < 1e-8);
    for (std::size_t i = 0; i < n; ++i) {
      double proj = 0.0;
      for (std::size_t j = 0; j < d; ++j) proj += (X.values[i * d + j] - mean[j]) * v[j];
      CHECK(std::abs(pc.scores[i] - proj) < 1e-8);
    }
  }
}

TEST_CASE("f-test p-values match reference values") {
  // Reference values computed from the F-distribution survival function.
  CHECK(f_test_pvalue(1.0, 1.0, 10.0) == doctest::Approx(0.340893).epsilon(1e-4));
  CHECK(f_test_pvalue(4.96460, 1.0, 10.0) == doctest::Approx(0.05).epsilon(1e-4));
  CHECK(f_test_pvalue(0.0, 1.0, 5.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(f_test_pvalue(100.0, 1.0, 30.0) < 1e-9);
}

TEST_CASE("gaussian log likelihood matches the direct formula") {
  Rng rng(99);
  const std::size_t n = 4, t = 6;
  Tensor y({n, t}), mean({n, t}), var({n, t});
  double ref = 0.0;
  for (std::size_t i = 0; i < n * t; ++i) {
    y[i] = rng.normal();
    mean[i] = rng.normal();
    var[i] = rng.uniform(0.2, 2.0);
    ref += -0.5 * std::log(2.0 * M_PI * var[i]) -
           0.5 * (y[i] - mean[i]) * (y[i] - mean[i]) / var[i];
  }
  CHECK(gaussian_loglik(y, mean, var) == doctest::Approx(ref).epsilon(1e-12));
}
