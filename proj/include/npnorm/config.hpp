#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "npnorm/cohort.hpp"
#include "npnorm/normative.hpp"
#include "npnorm/np_model.hpp"

namespace npnorm {

// Full run configuration. The JSON schema mirrors this struct; unknown
// keys anywhere in the document are rejected.
struct RunConfig {
  std::uint64_t seed = 1234;
  std::string out = "runs/default";

  CohortSpec cohort = default_cohort_spec();  // generation parameters
  std::string cohort_path;    // when set, load instead of generating

  std::vector<std::size_t> train_counts{45, 3, 3, 3};  // healthy, then groups

  std::size_t context_m = 20;

  std::size_t latent_dim = 16;
  double dropout = 0.1;

  TrainSchedule schedule;

  std::size_t predict_k = 8;   // dropout masks
  std::size_t predict_l = 8;   // latent draws per mask

  double top_fraction = 0.05;
  SummaryMode summary_mode = SummaryMode::absolute;
  std::string gevd_population = "train";  // train | test_healthy

  std::size_t n_regions = 9;       // uniform index partition when no mask file
  std::string region_masks_path;   // JSON list of voxel-index lists

  void validate() const;  // throws std::invalid_argument with the bad key
};

nlohmann::json default_config_json();
nlohmann::json config_to_json(const RunConfig& c);
RunConfig config_from_json(const nlohmann::json& j);

// Applies one dotted KEY=VALUE override, e.g. "context.M=5" or
// "schedule.lr_start=0.01". The key must already exist in the document;
// the value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

RunConfig load_config(const std::string& path,
                      const std::vector<std::string>& overrides);

}  // namespace npnorm
