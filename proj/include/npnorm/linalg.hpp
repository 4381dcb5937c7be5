#pragma once

#include <vector>

namespace npnorm {

struct LstsqResult {
  std::vector<double> coeffs;
  bool rank_deficient = false;
};

// Minimum-norm least-squares solution of X b ~= y, X given row-major as
// n x d. Rank deficiency is reported, not fatal.
LstsqResult lstsq(const std::vector<double>& X, std::size_t n, std::size_t d,
                  const std::vector<double>& y);

}  // namespace npnorm
