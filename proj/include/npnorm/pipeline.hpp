#pragma once

#include <map>
#include <string>
#include <vector>

#include "npnorm/cohort.hpp"
#include "npnorm/config.hpp"
#include "npnorm/mixed_effect.hpp"
#include "npnorm/normative.hpp"
#include "npnorm/np_model.hpp"

namespace npnorm {

SplitProtocol protocol_from_counts(const std::vector<std::size_t>& counts,
                                   std::uint64_t seed);

// Contiguous flat-index partition of T voxels into n near-equal blocks.
std::vector<std::vector<std::size_t>> uniform_regions(std::size_t n_voxels,
                                                      std::size_t n_regions);

struct TrainArtifacts {
  Split split;
  FixedEffectSet context;
  NpModel model;
};

// Split, standardize covariates, quantile-transform responses, build the
// bootstrap context set and train the model. All randomness derives from
// config.seed.
TrainArtifacts run_training(const Cohort& cohort, const RunConfig& config);

struct GroupMetric {
  int label = 0;
  double auc_np = 0.0;
  double auc_baseline = 0.0;
};

struct EvalResult {
  std::vector<std::size_t> test_indices;
  std::vector<int> test_labels;
  Tensor npm;                      // (N_test, T1, T2, T3), quantile space
  NoveltyScores scores;            // per test subject
  std::vector<double> baseline_summary;
  std::vector<GroupMetric> per_group;
  std::map<int, RegionAssociation> association;  // per patient group
  std::vector<GroupDifferenceMap> difference_maps;
};

EvalResult evaluate_run(const Cohort& cohort, TrainArtifacts& art,
                        const RunConfig& config);

// Region masks from config: the mask file when given, otherwise a uniform
// partition into config.n_regions blocks.
std::vector<std::vector<std::size_t>> load_regions(const RunConfig& config,
                                                   std::size_t n_voxels);

void write_evaluation(const std::string& dir, const EvalResult& result,
                      const RunConfig& config, const std::string& run_id);

}  // namespace npnorm
