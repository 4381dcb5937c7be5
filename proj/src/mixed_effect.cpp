#include "npnorm/mixed_effect.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <json.hpp>

#include "npnorm/linalg.hpp"

namespace npnorm {

namespace fs = std::filesystem;
using nlohmann::json;

void DesignMatrix::validate() const {
  if (values.ndim() != 2)
    throw std::invalid_argument("DesignMatrix: values must be 2-D");
  values.require_finite("DesignMatrix");
  if (!columns.empty() && columns.size() != cols())
    throw std::invalid_argument("DesignMatrix: column-name count mismatch");
}

DesignMatrix with_intercept(const DesignMatrix& X) {
  const std::size_t n = X.rows(), d = X.cols();
  DesignMatrix out;
  Tensor v({n, d + 1});
  for (std::size_t i = 0; i < n; ++i) {
    v[i * (d + 1)] = 1.0;
    for (std::size_t j = 0; j < d; ++j) v[i * (d + 1) + 1 + j] = X.values[i * d + j];
  }
  out.values = std::move(v);
  out.columns.push_back("intercept");
  for (std::size_t j = 0; j < d; ++j)
    out.columns.push_back(j < X.columns.size() ? X.columns[j]
                                               : "x" + std::to_string(j));
  return out;
}

Standardizer Standardizer::fit(const DesignMatrix& X) {
  const std::size_t N = X.rows(), D = X.cols();
  Standardizer s;
  s.mean.assign(D, 0.0);
  s.std.assign(D, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) s.mean[d] += X.values[n * D + d];
  for (double& m : s.mean) m /= static_cast<double>(N);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) {
      const double c = X.values[n * D + d] - s.mean[d];
      s.std[d] += c * c;
    }
  for (double& v : s.std) {
    v = std::sqrt(v / static_cast<double>(N));
    if (v < 1e-12) v = 1.0;  // constant column: leave centered only
  }
  return s;
}

DesignMatrix Standardizer::apply(const DesignMatrix& X) const {
  const std::size_t N = X.rows(), D = X.cols();
  if (mean.size() != D) throw std::invalid_argument("Standardizer: width mismatch");
  DesignMatrix out = X;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d)
      out.values[n * D + d] = (X.values[n * D + d] - mean[d]) / std[d];
  return out;
}

FixedEffectFit fit_fixed_effect(const DesignMatrix& X, const Tensor& Y) {
  X.validate();
  const std::size_t N = X.rows(), D = X.cols();
  if (Y.ndim() != 4 || Y.extent(0) != N)
    throw std::invalid_argument("fit_fixed_effect: Y must be (N,T1,T2,T3) with N=" +
                                std::to_string(N) + ", got " + shape_str(Y.shape()));
  if (N < D) throw std::invalid_argument("fit_fixed_effect: fewer subjects than covariates");
  const std::size_t T = Y.numel() / N;

  FixedEffectFit fit;
  fit.coefficients = Tensor({D, Y.extent(1), Y.extent(2), Y.extent(3)});
  std::vector<double> y(N);
  for (std::size_t v = 0; v < T; ++v) {
    for (std::size_t n = 0; n < N; ++n) y[n] = Y[n * T + v];
    LstsqResult r = lstsq(X.values.vec(), N, D, y);
    fit.rank_deficient = fit.rank_deficient || r.rank_deficient;
    for (std::size_t d = 0; d < D; ++d) fit.coefficients[d * T + v] = r.coeffs[d];
  }
  return fit;
}

Tensor predict_fixed_effect(const Tensor& A, const DesignMatrix& X) {
  X.validate();
  if (A.ndim() != 4 || A.extent(0) != X.cols())
    throw std::invalid_argument("predict_fixed_effect: A is " + shape_str(A.shape()) +
                                " but X has D=" + std::to_string(X.cols()));
  const std::size_t N = X.rows(), D = X.cols();
  const std::size_t T = A.numel() / D;
  Tensor out({N, A.extent(1), A.extent(2), A.extent(3)});
  for (std::size_t n = 0; n < N; ++n) {
    double* o = out.data() + n * T;
    for (std::size_t d = 0; d < D; ++d) {
      const double xv = X.values[n * D + d];
      const double* a = A.data() + d * T;
      for (std::size_t v = 0; v < T; ++v) o[v] += xv * a[v];
    }
  }
  return out;
}

FixedEffectSet build_context_set(const DesignMatrix& X, const Tensor& Y,
                                 std::size_t M, const Rng& rng) {
  X.validate();
  if (M == 0) throw std::invalid_argument("build_context_set: M must be >= 1");
  const std::size_t N = X.rows(), D = X.cols();
  if (N < D) throw std::invalid_argument("build_context_set: training set smaller than D");

  FixedEffectSet F;
  F.seed = rng.seed();
  for (std::size_t m = 0; m < M; ++m) {
    Rng channel = rng.split(m);
    DesignMatrix Xb;
    Tensor Yb;
    FixedEffectFit fit;
    bool ok = false;
    std::vector<std::size_t> idx(N);
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      for (std::size_t i = 0; i < N; ++i) idx[i] = channel.below(N);
      Xb.values = Tensor({N, D});
      Yb = Tensor({N, Y.extent(1), Y.extent(2), Y.extent(3)});
      const std::size_t T = Y.numel() / Y.extent(0);
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t d = 0; d < D; ++d)
          Xb.values[i * D + d] = X.values[idx[i] * D + d];
        std::copy(Y.data() + idx[i] * T, Y.data() + (idx[i] + 1) * T,
                  Yb.data() + i * T);
      }
      fit = fit_fixed_effect(Xb, Yb);
      ok = !fit.rank_deficient;
    }
    if (!ok)
      throw std::runtime_error("build_context_set: channel " + std::to_string(m) +
                               " rank-deficient after 100 resample attempts");
    F.coefficients.push_back(std::move(fit.coefficients));
    F.indices.push_back(idx);
  }
  return F;
}

Tensor context_functions(const FixedEffectSet& F, const DesignMatrix& X) {
  if (F.channels() == 0)
    throw std::invalid_argument("context_functions: empty fixed-effect set");
  const std::size_t N = X.rows();
  const auto& a0 = F.coefficients.front();
  const std::size_t T = a0.numel() / a0.extent(0);
  Tensor out({N, F.channels(), a0.extent(1), a0.extent(2), a0.extent(3)});
  for (std::size_t m = 0; m < F.channels(); ++m) {
    Tensor ch = predict_fixed_effect(F.coefficients[m], X);
    for (std::size_t n = 0; n < N; ++n)
      std::copy(ch.data() + n * T, ch.data() + (n + 1) * T,
                out.data() + (n * F.channels() + m) * T);
  }
  return out;
}

Tensor residuals(const Tensor& Y, const Tensor& Yhat) {
  if (!Y.same_shape(Yhat))
    throw std::invalid_argument("residuals: shape mismatch " + shape_str(Y.shape()) +
                                " vs " + shape_str(Yhat.shape()));
  Tensor out(Y.shape());
  for (std::size_t i = 0; i < Y.numel(); ++i) out[i] = Y[i] - Yhat[i];
  return out;
}

BlrPrediction baseline_blr_normative(const DesignMatrix& X_train, const Tensor& Y_train,
                                     const DesignMatrix& X_test) {
  X_train.validate();
  X_test.validate();
  const std::size_t N = X_train.rows(), D = X_train.cols();
  if (N <= D + 2)
    throw std::invalid_argument("baseline_blr_normative: need training size > D + 2");
  if (X_test.cols() != D)
    throw std::invalid_argument("baseline_blr_normative: covariate width mismatch");
  const std::size_t Ns = X_test.rows();
  const std::size_t T = Y_train.numel() / Y_train.extent(0);

  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> Xt(X_train.values.data(), N, D);
  Eigen::Map<const Mat> Xs(X_test.values.data(), Ns, D);

  Eigen::MatrixXd XtX = Xt.transpose() * Xt;
  BlrPrediction pred;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(XtX);
  if (!lu.isInvertible()) {
    XtX.diagonal().array() += 1e-6;  // ridge fallback
    pred.ridge_fallback = true;
  }
  const Eigen::MatrixXd XtX_inv = XtX.inverse();

  // Per-test-subject leverage term x*' (X'X)^-1 x* is voxel independent.
  std::vector<double> leverage(Ns);
  for (std::size_t s = 0; s < Ns; ++s) {
    const Eigen::VectorXd x = Xs.row(s).transpose();
    leverage[s] = x.dot(XtX_inv * x);
  }

  pred.mean = Tensor({Ns, Y_train.extent(1), Y_train.extent(2), Y_train.extent(3)});
  pred.variance = Tensor(pred.mean.shape());
  Eigen::VectorXd y(N);
  for (std::size_t v = 0; v < T; ++v) {
    for (std::size_t n = 0; n < N; ++n) y[n] = Y_train[n * T + v];
    const Eigen::VectorXd beta = XtX_inv * (Xt.transpose() * y);
    const Eigen::VectorXd resid = y - Xt * beta;
    const double sigma2 = resid.squaredNorm() / static_cast<double>(N - D);
    for (std::size_t s = 0; s < Ns; ++s) {
      pred.mean[s * T + v] = Xs.row(s).dot(beta);
      pred.variance[s * T + v] = sigma2 * (1.0 + leverage[s]);
    }
  }
  return pred;
}

void save_fixed_effect_set(const FixedEffectSet& F, const std::string& dir) {
  fs::create_directories(dir);
  json meta;
  meta["M"] = F.channels();
  meta["seed"] = F.seed;
  meta["indices"] = F.indices;
  std::ofstream mf(fs::path(dir) / "meta.json");
  mf << meta.dump(2) << "\n";
  if (!mf) throw std::runtime_error("save_fixed_effect_set: cannot write meta.json");
  for (std::size_t m = 0; m < F.channels(); ++m)
    save_npnt(F.coefficients[m], (fs::path(dir) / ("A_" + std::to_string(m) + ".npnt")).string());
}

FixedEffectSet load_fixed_effect_set(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "meta.json");
  if (!mf) throw std::runtime_error("load_fixed_effect_set: missing meta.json in " + dir);
  json meta = json::parse(mf);
  FixedEffectSet F;
  F.seed = meta.at("seed").get<std::uint64_t>();
  F.indices = meta.at("indices").get<std::vector<std::vector<std::size_t>>>();
  const auto M = meta.at("M").get<std::size_t>();
  for (std::size_t m = 0; m < M; ++m)
    F.coefficients.push_back(
        load_npnt((fs::path(dir) / ("A_" + std::to_string(m) + ".npnt")).string()));
  return F;
}

}  // namespace npnorm
