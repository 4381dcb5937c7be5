#include <doctest.h>

#include <cmath>

#include "npnorm/normative.hpp"
#include "npnorm/rng.hpp"

using namespace npnorm;

TEST_CASE("npm standardizes by the total predictive variance") {
  const std::size_t N = 3, T = 8;
  PredictiveSummary pred;
  pred.mean = Tensor({N, 2, 2, 2});
  pred.epistemic = Tensor({N, 2, 2, 2});
  pred.aleatoric = Tensor({N, 2, 2, 2});
  Tensor Y({N, 2, 2, 2});
  Rng rng(3);
  for (std::size_t i = 0; i < N * T; ++i) {
    pred.mean[i] = rng.normal();
    pred.epistemic[i] = rng.uniform(0.01, 0.5);
    pred.aleatoric[i] = rng.uniform(0.01, 0.5);
    Y[i] = rng.normal();
  }
  Tensor z = compute_npm(Y, pred);
  for (std::size_t i = 0; i < N * T; ++i) {
    const double ref =
        (Y[i] - pred.mean[i]) / std::sqrt(pred.epistemic[i] + pred.aleatoric[i]);
    CHECK(z[i] == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("abnormality probabilities come from the extreme-value fit") {
  Rng rng(7);
  std::vector<double> train(500);
  for (double& v : train) v = 1.0 - std::log(-std::log(rng.uniform())) * 0.2;
  std::vector<double> test = {0.5, 1.0, 1.5, 3.0};
  NoveltyScores s = abnormality_probabilities(train, test);
  REQUIRE(s.probability.size() == test.size());
  REQUIRE(s.summary == test);
  for (std::size_t i = 0; i + 1 < test.size(); ++i)
    CHECK(s.probability[i] < s.probability[i + 1]);
  for (double p : s.probability) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  // The probabilities are exactly the fitted cdf values.
  for (std::size_t i = 0; i < test.size(); ++i)
    CHECK(s.probability[i] == gevd_cdf(test[i], s.fit));
}

TEST_CASE("group difference maps subtract the healthy mean") {
  const std::size_t T = 4;
  Tensor npm({5, 2, 2, 1});
  std::vector<int> labels = {0, 0, 1, 1, 2};
  Rng rng(9);
  for (std::size_t i = 0; i < npm.numel(); ++i) npm[i] = rng.normal();
  auto maps = group_difference_maps(npm, labels);
  REQUIRE(maps.size() == 2);
  CHECK(maps[0].label == 1);
  CHECK(maps[1].label == 2);
  for (std::size_t v = 0; v < T; ++v) {
    const double healthy = 0.5 * (npm[v] + npm[T + v]);
    const double g1 = 0.5 * (npm[2 * T + v] + npm[3 * T + v]);
    CHECK(maps[0].difference[v] == doctest::Approx(g1 - healthy).epsilon(1e-12));
    CHECK(maps[1].difference[v] ==
          doctest::Approx(npm[4 * T + v] - healthy).epsilon(1e-12));
  }
}

TEST_CASE("planted signal in the npm is detected by the region association") {
  // Synthetic: region 1 mean deviation proportional to the dominant
  // covariate direction; everything else is noise.
  const std::size_t n = 40, T = 30;
  Rng rng(11);
  DesignMatrix X;
  X.values = Tensor({n, 2});
  X.columns = {"c0", "c1"};
  for (std::size_t i = 0; i < n; ++i) {
    X.values[i * 2] = 3.0 * rng.normal();  // dominant direction
    X.values[i * 2 + 1] = 0.3 * rng.normal();
  }
  PrincipalComponent pc = first_principal_component(X);

  Tensor npm({n, T, 1, 1});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t v = 0; v < T; ++v) {
      npm[s * T + v] = 0.3 * rng.normal();
      if (v >= 10 && v < 20) npm[s * T + v] += pc.scores[s];
    }
  std::vector<std::vector<std::size_t>> regions(3);
  for (std::size_t v = 0; v < 10; ++v) regions[0].push_back(v);
  for (std::size_t v = 10; v < 20; ++v) regions[1].push_back(v);
  for (std::size_t v = 20; v < 30; ++v) regions[2].push_back(v);

  RegionAssociation assoc = region_association(npm, regions, X, 0.01);
  CHECK(assoc.significant[1] == 1);
  CHECK(assoc.significant[0] == 0);
  CHECK(assoc.significant[2] == 0);
  CHECK(assoc.p_value[1] < 0.01 / 3.0);
}

TEST_CASE("summary statistics reject degenerate inputs") {
  Tensor z({1, 4});
  CHECK_THROWS(summary_statistic(z, 0.0));
  CHECK_THROWS(summary_statistic(z, 1.5));
  CHECK(summary_mode_from_string("absolute") == SummaryMode::absolute);
  CHECK(summary_mode_from_string("signed") == SummaryMode::signed_extreme);
  CHECK_THROWS(summary_mode_from_string("bogus"));
}
