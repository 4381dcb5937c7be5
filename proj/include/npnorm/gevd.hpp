#pragma once

#include <cstddef>
#include <vector>

namespace npnorm {

struct GevdParams {
  double mu = 0.0;
  double sigma = 1.0;
  double xi = 0.0;

  // True when the optimizer failed to improve on the Gumbel sub-family
  // and the fit fell back to xi = 0.
  bool gumbel_fallback = false;
};

// CDF of the generalized extreme value distribution. The xi -> 0 limit
// exp(-exp(-(a - mu)/sigma)) is taken when |xi| < 1e-9; outside the
// support the value is exactly 0 or 1.
double gevd_cdf(double a, const GevdParams& p);

double gevd_logpdf(double a, const GevdParams& p);
double gevd_negloglik(const std::vector<double>& a, double mu, double sigma,
                      double xi);

// Maximum-likelihood fit by Nelder-Mead from Gumbel moment estimates
// (sigma0 = std * sqrt(6)/pi, mu0 = mean - 0.5772 * sigma0, xi0 = 0.1).
// Falls back to the Gumbel moment fit when optimization fails to produce
// a finite improvement.
GevdParams fit_gevd(const std::vector<double>& a);

}  // namespace npnorm
