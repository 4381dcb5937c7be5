#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "npnorm/pipeline.hpp"

using namespace npnorm;

namespace {

// Small configuration so pipeline tests stay fast; the full-scale defaults
// are exercised by the acceptance gate.
RunConfig small_config(std::uint64_t seed) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.cohort.seed = seed;
  cfg.cohort.n_healthy = 24;
  cfg.cohort.n_per_group = {4, 4, 4};
  cfg.cohort.grid = {4, 4, 2};
  cfg.cohort.deviations.clear();
  for (std::size_t g = 0; g < 3; ++g) {
    GroupDeviation d;
    for (std::size_t i = 0; i < 3; ++i) d.region.push_back(g * 10 + i);
    d.offset_in_noise_std = 3.0;
    d.covariate_coupling = 0.3;
    cfg.cohort.deviations.push_back(d);
  }
  cfg.train_counts = {18, 1, 1, 1};
  cfg.context_m = 3;
  cfg.latent_dim = 4;
  cfg.schedule.epochs = 6;
  cfg.schedule.batch_size = 4;
  cfg.predict_k = 2;
  cfg.predict_l = 2;
  cfg.top_fraction = 0.05;
  return cfg;
}

}  // namespace

TEST_CASE("training artifacts respect the configured split and context size") {
  RunConfig cfg = small_config(3);
  Cohort cohort = generate(cfg.cohort);
  TrainArtifacts art = run_training(cohort, cfg);
  CHECK(art.split.train.size() == 21);
  CHECK(art.split.test.size() == 15);
  CHECK(art.context.channels() == cfg.context_m);
  CHECK(art.model.arch().channels == cfg.context_m);
  CHECK(art.model.train_log().size() == cfg.schedule.epochs);
}

TEST_CASE("evaluation produces scores for every test subject") {
  RunConfig cfg = small_config(5);
  Cohort cohort = generate(cfg.cohort);
  TrainArtifacts art = run_training(cohort, cfg);
  EvalResult res = evaluate_run(cohort, art, cfg);
  const std::size_t n_test = art.split.test.size();
  CHECK(res.test_indices.size() == n_test);
  CHECK(res.scores.summary.size() == n_test);
  CHECK(res.scores.probability.size() == n_test);
  CHECK(res.baseline_summary.size() == n_test);
  CHECK(res.npm.extent(0) == n_test);
  for (double p : res.scores.probability) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  CHECK(res.per_group.size() == 3);
  for (const auto& g : res.per_group) {
    CHECK(g.auc_np >= 0.0);
    CHECK(g.auc_np <= 1.0);
  }
  CHECK(res.difference_maps.size() == 3);
}

TEST_CASE("the whole pipeline is bitwise deterministic in the seed") {
  RunConfig cfg = small_config(7);
  Cohort c1 = generate(cfg.cohort), c2 = generate(cfg.cohort);
  TrainArtifacts a1 = run_training(c1, cfg), a2 = run_training(c2, cfg);
  EvalResult r1 = evaluate_run(c1, a1, cfg), r2 = evaluate_run(c2, a2, cfg);
  REQUIRE(r1.npm.numel() == r2.npm.numel());
  CHECK(std::memcmp(r1.npm.data(), r2.npm.data(),
                    r1.npm.numel() * sizeof(double)) == 0);
  CHECK(r1.scores.summary == r2.scores.summary);
  CHECK(r1.scores.probability == r2.scores.probability);
  CHECK(r1.baseline_summary == r2.baseline_summary);
}

TEST_CASE("different seeds give different models") {
  RunConfig cfg = small_config(11);
  Cohort c = generate(cfg.cohort);
  TrainArtifacts a1 = run_training(c, cfg);
  cfg.seed = 12;
  TrainArtifacts a2 = run_training(c, cfg);
  const Tensor& w1 = a1.model.param("enc.conv0.w");
  const Tensor& w2 = a2.model.param("enc.conv0.w");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < w1.numel(); ++i) diff += (w1[i] != w2[i]);
  CHECK(diff > 0);
}

TEST_CASE("region masks load from file or fall back to the uniform partition") {
  RunConfig cfg = small_config(13);
  cfg.cohort.grid = {4, 4, 2};
  auto regions = load_regions(cfg, 32);
  CHECK(regions.size() == cfg.n_regions);

  const std::string path = "/tmp/npnorm_test_regions.json";
  {
    std::ofstream f(path);
    f << "[[0,1,2],[5,6]]";
  }
  cfg.region_masks_path = path;
  auto from_file = load_regions(cfg, 32);
  REQUIRE(from_file.size() == 2);
  CHECK(from_file[0] == std::vector<std::size_t>{0, 1, 2});
  CHECK(from_file[1] == std::vector<std::size_t>{5, 6});
  std::remove(path.c_str());
}
