#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "npnorm/cohort.hpp"
#include "npnorm/pipeline.hpp"

using namespace npnorm;

TEST_CASE("generation is deterministic in the seed") {
  CohortSpec spec = default_cohort_spec();
  spec.seed = 77;
  Cohort a = generate(spec), b = generate(spec);
  REQUIRE(a.Y.numel() == b.Y.numel());
  for (std::size_t i = 0; i < a.Y.numel(); ++i) CHECK(a.Y[i] == b.Y[i]);
  for (std::size_t i = 0; i < a.X.numel(); ++i) CHECK(a.X[i] == b.X[i]);
  CHECK(a.labels == b.labels);

  spec.seed = 78;
  Cohort c = generate(spec);
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.Y.numel(); ++i) diff += (a.Y[i] != c.Y[i]);
  CHECK(diff > a.Y.numel() / 2);
}

TEST_CASE("default cohort has the documented composition") {
  CohortSpec spec = default_cohort_spec();
  Cohort c = generate(spec);
  CHECK(c.n_subjects() == 90);
  std::map<int, std::size_t> counts;
  for (int l : c.labels) ++counts[l];
  CHECK(counts[0] == 60);
  CHECK(counts[1] == 10);
  CHECK(counts[2] == 10);
  CHECK(counts[3] == 10);
  // Planted regions are disjoint and 5% of the volume each.
  std::set<std::size_t> seen;
  for (const auto& d : c.planted) {
    CHECK(d.region.size() == c.spec.n_voxels() / 20);
    for (std::size_t v : d.region) CHECK(seen.insert(v).second);
  }
}

TEST_CASE("planted offsets shift the patient group means") {
  CohortSpec spec = default_cohort_spec();
  spec.seed = 5;
  for (auto& d : spec.deviations) d.covariate_coupling = 0.0;  // pure offset
  Cohort c = generate(spec);
  const std::size_t T = c.spec.n_voxels();
  for (std::size_t g = 0; g < c.planted.size(); ++g) {
    const int label = static_cast<int>(g) + 1;
    double healthy = 0.0, patient = 0.0;
    std::size_t nh = 0, np = 0;
    for (std::size_t s = 0; s < c.n_subjects(); ++s)
      for (std::size_t v : c.planted[g].region) {
        if (c.labels[s] == kHealthy) healthy += c.Y[s * T + v], ++nh;
        if (c.labels[s] == label) patient += c.Y[s * T + v], ++np;
      }
    const double gap = patient / np - healthy / nh;
    const double expected = 3.0 * c.spec.noise_std;
    CHECK(gap == doctest::Approx(expected).epsilon(0.35));
  }
}

TEST_CASE("split honors per-label train counts") {
  CohortSpec spec = default_cohort_spec();
  spec.seed = 9;
  Cohort c = generate(spec);
  SplitProtocol proto = protocol_from_counts({45, 3, 3, 3}, 9);
  Split s = split(c, proto);
  CHECK(s.train.size() == 54);
  CHECK(s.test.size() == 36);

  std::map<int, std::size_t> train_counts;
  for (std::size_t i : s.train) ++train_counts[c.labels[i]];
  CHECK(train_counts[0] == 45);
  CHECK(train_counts[1] == 3);
  CHECK(train_counts[2] == 3);
  CHECK(train_counts[3] == 3);

  // Disjoint and covering.
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  for (std::size_t i : s.test) CHECK(all.insert(i).second);
  CHECK(all.size() == c.n_subjects());
}

TEST_CASE("large cohort splits to the documented test composition") {
  CohortSpec spec;
  spec.n_healthy = 119;
  spec.n_per_group = {49, 39, 48};
  spec.grid = {4, 4, 2};
  spec.covariates = 3;
  spec.deviations.assign(3, GroupDeviation{{0, 1}, 3.0, 0.0});
  spec.seed = 31;
  Cohort c = generate(spec);

  SplitProtocol proto = protocol_from_counts({75, 5, 5, 5}, 31);
  Split s = split(c, proto);

  std::map<int, std::size_t> test_counts, train_counts;
  for (std::size_t i : s.test) ++test_counts[c.labels[i]];
  for (std::size_t i : s.train) ++train_counts[c.labels[i]];
  CHECK(test_counts[0] == 44);
  CHECK(test_counts[1] == 44);
  CHECK(test_counts[2] == 34);
  CHECK(test_counts[3] == 43);
  // 15 of the 90 training subjects carry planted deviations.
  CHECK(train_counts[1] + train_counts[2] + train_counts[3] == 15);
  CHECK(s.train.size() == 90);
}

TEST_CASE("split rejects more draws than subjects") {
  CohortSpec spec = default_cohort_spec();
  Cohort c = generate(spec);
  CHECK_THROWS(split(c, protocol_from_counts({61, 3, 3, 3}, 1)));
}

TEST_CASE("cohort round-trips through disk") {
  CohortSpec spec = default_cohort_spec();
  spec.seed = 12;
  Cohort a = generate(spec);
  const std::string dir = "/tmp/npnorm_test_cohort";
  save_cohort(a, dir);
  Cohort b = load_cohort(dir);
  CHECK(a.labels == b.labels);
  for (std::size_t i = 0; i < a.Y.numel(); ++i) CHECK(a.Y[i] == b.Y[i]);
  for (std::size_t i = 0; i < a.X.numel(); ++i) CHECK(a.X[i] == b.X[i]);
  for (std::size_t i = 0; i < a.A_true.numel(); ++i) CHECK(a.A_true[i] == b.A_true[i]);
  REQUIRE(a.planted.size() == b.planted.size());
  for (std::size_t g = 0; g < a.planted.size(); ++g)
    CHECK(a.planted[g].region == b.planted[g].region);
  std::filesystem::remove_all(dir);
}

TEST_CASE("uniform regions partition the volume") {
  auto regions = uniform_regions(480, 9);
  REQUIRE(regions.size() == 9);
  std::set<std::size_t> seen;
  for (const auto& r : regions) {
    CHECK(r.size() >= 53);
    CHECK(r.size() <= 54);
    for (std::size_t v : r) CHECK(seen.insert(v).second);
  }
  CHECK(seen.size() == 480);
}
