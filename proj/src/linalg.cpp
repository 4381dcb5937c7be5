#include "npnorm/linalg.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace npnorm {

LstsqResult lstsq(const std::vector<double>& X, std::size_t n, std::size_t d,
                  const std::vector<double>& y) {
  if (n < d) throw std::invalid_argument("lstsq: fewer rows than columns");
  if (X.size() != n * d || y.size() != n)
    throw std::invalid_argument("lstsq: size mismatch");
  for (double v : X)
    if (!std::isfinite(v)) throw std::invalid_argument("lstsq: non-finite design");
  for (double v : y)
    if (!std::isfinite(v)) throw std::invalid_argument("lstsq: non-finite response");

  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      A(X.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  Eigen::Map<const Eigen::VectorXd> b(y.data(), static_cast<Eigen::Index>(n));

  // Column-pivoted orthogonal decomposition; solve() is minimum-norm when
  // the design is rank deficient.
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A);
  Eigen::VectorXd sol = cod.solve(b);

  LstsqResult r;
  r.rank_deficient = cod.rank() < static_cast<Eigen::Index>(d);
  r.coeffs.assign(sol.data(), sol.data() + d);
  return r;
}

}  // namespace npnorm
