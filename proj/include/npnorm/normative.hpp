#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "npnorm/gevd.hpp"
#include "npnorm/mixed_effect.hpp"
#include "npnorm/np_model.hpp"
#include "npnorm/tensor.hpp"

namespace npnorm {

// Per-voxel deviation z = (y - mean) / sqrt(total predictive variance),
// computed in the model's quantile space.
Tensor compute_npm(const Tensor& Y, const PredictiveSummary& pred);

enum class SummaryMode { absolute, signed_extreme };

SummaryMode summary_mode_from_string(const std::string& s);
std::string to_string(SummaryMode m);

// Mean of the ceil(fraction * T) most extreme voxels of one subject's
// volume. `absolute` averages |z|; `signed_extreme` ranks by |z| but
// averages the signed values. Boundary ties break toward lower voxel
// index.
double summary_statistic(const Tensor& npm_one, double fraction,
                         SummaryMode mode = SummaryMode::absolute);

// Row-wise version over an (N, T1, T2, T3) NPM stack.
std::vector<double> summary_statistics(const Tensor& npm, double fraction,
                                       SummaryMode mode = SummaryMode::absolute);

struct NoveltyScores {
  GevdParams fit;                   // fitted on the train summaries
  std::vector<double> summary;      // test summaries, copied through
  std::vector<double> probability;  // gevd_cdf of each test summary
};

// Fits the extreme-value model on healthy training summaries, then maps
// each test summary to P(A <= a).
NoveltyScores abnormality_probabilities(const std::vector<double>& train_summaries,
                                        const std::vector<double>& test_summaries);

// Mann-Whitney AUC of scores for label 1 over label 0; ties count 0.5.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct RegionAssociation {
  std::vector<double> r2;        // per region
  std::vector<double> f_stat;    // F(1, n-2)
  std::vector<double> p_value;   // upper tail, uncorrected
  std::vector<int> significant;  // 1 when p * bonferroni < alpha
  std::size_t bonferroni = 1;
  double alpha = 0.01;
};

// Mean NPM within each region per subject, regressed on the first
// principal component of the covariates by simple linear regression.
RegionAssociation region_association(
    const Tensor& npm, const std::vector<std::vector<std::size_t>>& regions,
    const DesignMatrix& X, double alpha = 0.01);

// Upper-tail p-value of F(d1, d2) via the regularized incomplete beta.
double f_test_pvalue(double f, double d1, double d2);
double incomplete_beta_reg(double a, double b, double x);

// Leading eigenvector of the column-centered covariance of X by power
// iteration (tol 1e-14), sign fixed so the largest-magnitude entry is
// positive. scores are the centered projections, one per subject.
struct PrincipalComponent {
  std::vector<double> direction;
  std::vector<double> scores;
};
PrincipalComponent first_principal_component(const DesignMatrix& X);

struct GroupDifferenceMap {
  int label = 0;
  Tensor difference;  // group mean NPM minus healthy mean NPM
};

// One volume per non-healthy label present; label 0 is the healthy
// reference group.
std::vector<GroupDifferenceMap> group_difference_maps(const Tensor& npm,
                                                      const std::vector<int>& labels);

}  // namespace npnorm
