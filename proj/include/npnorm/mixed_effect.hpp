#pragma once

#include <string>
#include <vector>

#include "npnorm/rng.hpp"
#include "npnorm/tensor.hpp"

namespace npnorm {

struct DesignMatrix {
  Tensor values;  // (N, D)
  std::vector<std::string> columns;

  std::size_t rows() const { return values.extent(0); }
  std::size_t cols() const { return values.extent(1); }
  void validate() const;
};

// Standardized covariates prefixed with a constant 1 column, needed
// because quantile-space responses are not centered at zero.
DesignMatrix with_intercept(const DesignMatrix& X);

// Train-set standardization applied to covariates before any fit.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> std;

  static Standardizer fit(const DesignMatrix& X);
  DesignMatrix apply(const DesignMatrix& X) const;
};

struct FixedEffectSet {
  std::vector<Tensor> coefficients;               // M tensors (D, T1, T2, T3)
  std::vector<std::vector<std::size_t>> indices;  // bootstrap resample per channel
  std::uint64_t seed = 0;

  std::size_t channels() const { return coefficients.size(); }
};

struct FixedEffectFit {
  Tensor coefficients;  // (D, T1, T2, T3)
  bool rank_deficient = false;
};

// Independent least-squares fit per voxel.
FixedEffectFit fit_fixed_effect(const DesignMatrix& X, const Tensor& Y);

// (n,i,j,k) = sum_d X[n,d] * A[d,i,j,k]
Tensor predict_fixed_effect(const Tensor& A, const DesignMatrix& X);

// M bootstrap resamples (with replacement, size = training size), one RNG
// stream per channel so growing M never reshuffles earlier channels.
FixedEffectSet build_context_set(const DesignMatrix& X, const Tensor& Y,
                                 std::size_t M, const Rng& rng);

// (N, M, T1, T2, T3): channel m evaluates coefficient set m at X.
Tensor context_functions(const FixedEffectSet& F, const DesignMatrix& X);

Tensor residuals(const Tensor& Y, const Tensor& Yhat);

struct BlrPrediction {
  Tensor mean;      // (N*, T1, T2, T3)
  Tensor variance;  // (N*, T1, T2, T3) predictive variance
  bool ridge_fallback = false;
};

// Mass-univariate Bayesian-linear baseline: per voxel OLS mean with
// predictive variance sigma^2 * (1 + x*' (X'X)^-1 x*).
BlrPrediction baseline_blr_normative(const DesignMatrix& X_train, const Tensor& Y_train,
                                     const DesignMatrix& X_test);

void save_fixed_effect_set(const FixedEffectSet& F, const std::string& dir);
FixedEffectSet load_fixed_effect_set(const std::string& dir);

}  // namespace npnorm
