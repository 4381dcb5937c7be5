#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "npnorm/rng.hpp"
#include "npnorm/tensor.hpp"

namespace npnorm {

// Subject labels: 0 = healthy, 1..n = patient groups.
constexpr int kHealthy = 0;

struct GroupDeviation {
  std::vector<std::size_t> region;   // flat voxel indices
  double offset_in_noise_std = 3.0;  // additive offset, units of noise std
  double covariate_coupling = 0.0;   // scales offset by (1 + c * pc1 score)
};

struct CohortSpec {
  std::size_t n_healthy = 60;
  std::vector<std::size_t> n_per_group = {10, 10, 10};
  std::size_t covariates = 4;
  std::array<std::size_t, 3> grid = {8, 10, 6};
  double fixed_effect_magnitude = 1.0;
  double random_effect_scale = 0.1;
  std::size_t random_effect_rank = 4;
  double correlation_length = 1.0;  // voxels, Gaussian blur sigma
  double noise_std = 0.25;
  std::vector<GroupDeviation> deviations;  // one per patient group
  std::uint64_t seed = 0;

  std::size_t n_subjects() const;
  std::size_t n_voxels() const { return grid[0] * grid[1] * grid[2]; }
  void validate() const;
};

struct Cohort {
  CohortSpec spec;
  Tensor X;                 // (N, D)
  Tensor Y;                 // (N, T1, T2, T3)
  std::vector<int> labels;  // per-subject group id

  // Ground truth retained for oracle tests.
  Tensor A_true;  // (D, T1, T2, T3)
  std::vector<GroupDeviation> planted;
  std::vector<double> pc1_scores;  // per-subject, used for planted coupling

  std::size_t n_subjects() const { return labels.size(); }
};

struct SplitProtocol {
  std::map<int, std::size_t> train_counts;  // label -> count drawn into train
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Builds the default spec: planted 3-noise-std deviations in 5% of voxels
// per patient group, in disjoint corners of the grid, coupled to PC1.
CohortSpec default_cohort_spec();

Cohort generate(const CohortSpec& spec);
Split split(const Cohort& cohort, const SplitProtocol& protocol);

void save_cohort(const Cohort& cohort, const std::string& dir);
Cohort load_cohort(const std::string& dir);

}  // namespace npnorm
