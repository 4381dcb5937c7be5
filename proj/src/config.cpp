#include "npnorm/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace npnorm {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + where + it.key() + "'");
}

json deviation_to_json(const GroupDeviation& d) {
  return {{"region", d.region},
          {"offset_in_noise_std", d.offset_in_noise_std},
          {"covariate_coupling", d.covariate_coupling}};
}

GroupDeviation deviation_from_json(const json& j) {
  reject_unknown(j, {"region", "offset_in_noise_std", "covariate_coupling"},
                 "cohort.deviations.");
  GroupDeviation d;
  d.region = j.at("region").get<std::vector<std::size_t>>();
  d.offset_in_noise_std = j.at("offset_in_noise_std").get<double>();
  d.covariate_coupling = j.at("covariate_coupling").get<double>();
  return d;
}

json cohort_to_json(const CohortSpec& s) {
  json dev = json::array();
  for (const auto& d : s.deviations) dev.push_back(deviation_to_json(d));
  return {{"n_healthy", s.n_healthy},
          {"n_per_group", s.n_per_group},
          {"covariates", s.covariates},
          {"grid", s.grid},
          {"fixed_effect_magnitude", s.fixed_effect_magnitude},
          {"random_effect_scale", s.random_effect_scale},
          {"random_effect_rank", s.random_effect_rank},
          {"correlation_length", s.correlation_length},
          {"noise_std", s.noise_std},
          {"deviations", dev}};
}

CohortSpec cohort_from_json(const json& j) {
  reject_unknown(j,
                 {"path", "n_healthy", "n_per_group", "covariates", "grid",
                  "fixed_effect_magnitude", "random_effect_scale",
                  "random_effect_rank", "correlation_length", "noise_std",
                  "deviations"},
                 "cohort.");
  CohortSpec s = default_cohort_spec();
  if (j.contains("n_healthy")) s.n_healthy = j.at("n_healthy").get<std::size_t>();
  if (j.contains("n_per_group"))
    s.n_per_group = j.at("n_per_group").get<std::vector<std::size_t>>();
  if (j.contains("covariates")) s.covariates = j.at("covariates").get<std::size_t>();
  if (j.contains("grid")) s.grid = j.at("grid").get<std::array<std::size_t, 3>>();
  if (j.contains("fixed_effect_magnitude"))
    s.fixed_effect_magnitude = j.at("fixed_effect_magnitude").get<double>();
  if (j.contains("random_effect_scale"))
    s.random_effect_scale = j.at("random_effect_scale").get<double>();
  if (j.contains("random_effect_rank"))
    s.random_effect_rank = j.at("random_effect_rank").get<std::size_t>();
  if (j.contains("correlation_length"))
    s.correlation_length = j.at("correlation_length").get<double>();
  if (j.contains("noise_std")) s.noise_std = j.at("noise_std").get<double>();
  if (j.contains("deviations")) {
    s.deviations.clear();
    for (const auto& d : j.at("deviations")) s.deviations.push_back(deviation_from_json(d));
  }
  return s;
}

}  // namespace

void RunConfig::validate() const {
  cohort.validate();
  schedule.validate();
  if (train_counts.empty())
    throw std::invalid_argument("config: split.train_counts must not be empty");
  if (context_m == 0) throw std::invalid_argument("config: context.M must be >= 1");
  if (latent_dim == 0)
    throw std::invalid_argument("config: architecture.latent_dim must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw std::invalid_argument("config: architecture.dropout must be in [0,1)");
  if (predict_k == 0 || predict_l == 0)
    throw std::invalid_argument("config: prediction.K and prediction.L must be >= 1");
  if (!(top_fraction > 0.0 && top_fraction <= 1.0))
    throw std::invalid_argument("config: novelty.top_fraction must be in (0,1]");
  if (gevd_population != "train" && gevd_population != "test_healthy")
    throw std::invalid_argument(
        "config: novelty.gevd_population must be 'train' or 'test_healthy'");
  if (n_regions == 0)
    throw std::invalid_argument("config: analysis.regions must be >= 1");
}

json config_to_json(const RunConfig& c) {
  json cohort = cohort_to_json(c.cohort);
  cohort["path"] = c.cohort_path;
  return {{"seed", c.seed},
          {"out", c.out},
          {"cohort", cohort},
          {"split", {{"train_counts", c.train_counts}}},
          {"context", {{"M", c.context_m}}},
          {"architecture", {{"latent_dim", c.latent_dim}, {"dropout", c.dropout}}},
          {"schedule",
           {{"epochs", c.schedule.epochs},
            {"lr_start", c.schedule.lr_start},
            {"lr_end", c.schedule.lr_end},
            {"batch_size", c.schedule.batch_size},
            {"n_mc", c.schedule.n_mc},
            {"grad_clip", c.schedule.grad_clip}}},
          {"prediction", {{"K", c.predict_k}, {"L", c.predict_l}}},
          {"novelty",
           {{"top_fraction", c.top_fraction},
            {"mode", to_string(c.summary_mode)},
            {"gevd_population", c.gevd_population}}},
          {"analysis",
           {{"regions", c.n_regions}, {"region_masks", c.region_masks_path}}}};
}

json default_config_json() { return config_to_json(RunConfig{}); }

RunConfig config_from_json(const json& j) {
  reject_unknown(j,
                 {"seed", "out", "cohort", "split", "context", "architecture",
                  "schedule", "prediction", "novelty", "analysis"},
                 "");
  RunConfig c;
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("out")) c.out = j.at("out").get<std::string>();
  if (j.contains("cohort")) {
    const json& jc = j.at("cohort");
    c.cohort = cohort_from_json(jc);
    if (jc.contains("path")) c.cohort_path = jc.at("path").get<std::string>();
  }
  if (j.contains("split")) {
    reject_unknown(j.at("split"), {"train_counts"}, "split.");
    c.train_counts = j.at("split").at("train_counts").get<std::vector<std::size_t>>();
  }
  if (j.contains("context")) {
    reject_unknown(j.at("context"), {"M"}, "context.");
    c.context_m = j.at("context").at("M").get<std::size_t>();
  }
  if (j.contains("architecture")) {
    const json& ja = j.at("architecture");
    reject_unknown(ja, {"latent_dim", "dropout"}, "architecture.");
    if (ja.contains("latent_dim")) c.latent_dim = ja.at("latent_dim").get<std::size_t>();
    if (ja.contains("dropout")) c.dropout = ja.at("dropout").get<double>();
  }
  if (j.contains("schedule")) {
    const json& js = j.at("schedule");
    reject_unknown(js, {"epochs", "lr_start", "lr_end", "batch_size", "n_mc", "grad_clip"},
                   "schedule.");
    if (js.contains("epochs")) c.schedule.epochs = js.at("epochs").get<std::size_t>();
    if (js.contains("lr_start")) c.schedule.lr_start = js.at("lr_start").get<double>();
    if (js.contains("lr_end")) c.schedule.lr_end = js.at("lr_end").get<double>();
    if (js.contains("batch_size"))
      c.schedule.batch_size = js.at("batch_size").get<std::size_t>();
    if (js.contains("n_mc")) c.schedule.n_mc = js.at("n_mc").get<std::size_t>();
    if (js.contains("grad_clip")) c.schedule.grad_clip = js.at("grad_clip").get<double>();
  }
  if (j.contains("prediction")) {
    const json& jp = j.at("prediction");
    reject_unknown(jp, {"K", "L"}, "prediction.");
    if (jp.contains("K")) c.predict_k = jp.at("K").get<std::size_t>();
    if (jp.contains("L")) c.predict_l = jp.at("L").get<std::size_t>();
  }
  if (j.contains("novelty")) {
    const json& jn = j.at("novelty");
    reject_unknown(jn, {"top_fraction", "mode", "gevd_population"}, "novelty.");
    if (jn.contains("top_fraction")) c.top_fraction = jn.at("top_fraction").get<double>();
    if (jn.contains("mode"))
      c.summary_mode = summary_mode_from_string(jn.at("mode").get<std::string>());
    if (jn.contains("gevd_population"))
      c.gevd_population = jn.at("gevd_population").get<std::string>();
  }
  if (j.contains("analysis")) {
    const json& ja = j.at("analysis");
    reject_unknown(ja, {"regions", "region_masks"}, "analysis.");
    if (ja.contains("regions")) c.n_regions = ja.at("regions").get<std::size_t>();
    if (ja.contains("region_masks"))
      c.region_masks_path = ja.at("region_masks").get<std::string>();
  }
  c.validate();
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("--set expects KEY=VALUE, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json* cur = &doc;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (!cur->is_object() || !cur->contains(part))
      throw std::invalid_argument("--set: unknown config key '" + key + "'");
    cur = &(*cur)[part];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) parsed = value;  // bare strings
  *cur = std::move(parsed);
}

RunConfig load_config(const std::string& path,
                      const std::vector<std::string>& overrides) {
  json doc = default_config_json();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("config: cannot read " + path);
    json file = json::parse(f, nullptr, /*allow_exceptions=*/false);
    if (file.is_discarded())
      throw std::invalid_argument("config: " + path + " is not valid JSON");
    // Validate key names against the schema first, then merge over defaults.
    config_from_json(file);
    doc.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

}  // namespace npnorm
