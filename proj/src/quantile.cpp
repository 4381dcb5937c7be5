#include "npnorm/quantile.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace npnorm {

QuantileTransform QuantileTransform::fit(const Tensor& Y_train, double eps) {
  if (Y_train.ndim() < 2)
    throw std::invalid_argument("QuantileTransform: need (N, ...) training tensor");
  if (!(eps > 0.0 && eps < 0.5))
    throw std::invalid_argument("QuantileTransform: eps must be in (0, 0.5)");
  Y_train.require_finite("QuantileTransform::fit");

  QuantileTransform t;
  t.eps_ = eps;
  t.n_train_ = Y_train.extent(0);
  t.n_voxels_ = Y_train.numel() / t.n_train_;
  t.grid_.assign(Y_train.shape().begin() + 1, Y_train.shape().end());
  if (t.n_train_ < 2)
    throw std::invalid_argument("QuantileTransform: need at least 2 training subjects");

  t.sorted_.resize(t.n_voxels_ * t.n_train_);
  t.constant_.assign(t.n_voxels_, 0);
  std::vector<double> col(t.n_train_);
  for (std::size_t v = 0; v < t.n_voxels_; ++v) {
    for (std::size_t n = 0; n < t.n_train_; ++n) col[n] = Y_train[n * t.n_voxels_ + v];
    std::sort(col.begin(), col.end());
    if (col.front() == col.back()) t.constant_[v] = 1;
    std::copy(col.begin(), col.end(), t.sorted_.begin() + v * t.n_train_);
  }
  return t;
}

double QuantileTransform::apply_one(std::size_t voxel, double y) const {
  if (constant_[voxel]) return 0.5;
  const double* s = sorted_.data() + voxel * n_train_;
  const double n = static_cast<double>(n_train_);
  double pos;
  if (y <= s[0]) {
    pos = 0.5 / n;
  } else if (y >= s[n_train_ - 1]) {
    pos = (n - 0.5) / n;
  } else {
    // first index with s[i] > y
    const double* hi = std::upper_bound(s, s + n_train_, y);
    std::size_t i = static_cast<std::size_t>(hi - s);  // >= 1 here
    const double lo_v = s[i - 1], hi_v = s[i];
    const double lo_p = (static_cast<double>(i - 1) + 0.5) / n;
    const double hi_p = (static_cast<double>(i) + 0.5) / n;
    pos = hi_v == lo_v ? lo_p : lo_p + (hi_p - lo_p) * (y - lo_v) / (hi_v - lo_v);
  }
  return std::clamp(pos, eps_, 1.0 - eps_);
}

double QuantileTransform::invert_one(std::size_t voxel, double u) const {
  const double* s = sorted_.data() + voxel * n_train_;
  if (constant_[voxel]) return s[0];
  const double n = static_cast<double>(n_train_);
  const double uu = std::clamp(u, 0.5 / n, (n - 0.5) / n);
  const double rank = uu * n - 0.5;  // in [0, n-1]
  const std::size_t i = static_cast<std::size_t>(std::floor(rank));
  if (i + 1 >= n_train_) return s[n_train_ - 1];
  const double frac = rank - static_cast<double>(i);
  return s[i] + frac * (s[i + 1] - s[i]);
}

Tensor QuantileTransform::apply(const Tensor& Y) const {
  if (Y.numel() % n_voxels_ != 0)
    throw std::invalid_argument("QuantileTransform::apply: voxel count mismatch");
  const std::size_t N = Y.numel() / n_voxels_;
  Tensor out(Y.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t v = 0; v < n_voxels_; ++v)
      out[n * n_voxels_ + v] = apply_one(v, Y[n * n_voxels_ + v]);
  return out;
}

Tensor QuantileTransform::invert(const Tensor& U) const {
  if (U.numel() % n_voxels_ != 0)
    throw std::invalid_argument("QuantileTransform::invert: voxel count mismatch");
  const std::size_t N = U.numel() / n_voxels_;
  Tensor out(U.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t v = 0; v < n_voxels_; ++v)
      out[n * n_voxels_ + v] = invert_one(v, U[n * n_voxels_ + v]);
  return out;
}

Tensor QuantileTransform::serialize() const {
  const std::size_t header = 3 + n_voxels_ + grid_.size() + 1;
  Tensor t({header + n_voxels_ * n_train_});
  t[0] = eps_;
  t[1] = static_cast<double>(n_train_);
  t[2] = static_cast<double>(n_voxels_);
  for (std::size_t v = 0; v < n_voxels_; ++v) t[3 + v] = constant_[v];
  t[3 + n_voxels_] = static_cast<double>(grid_.size());
  for (std::size_t i = 0; i < grid_.size(); ++i)
    t[4 + n_voxels_ + i] = static_cast<double>(grid_[i]);
  std::copy(sorted_.begin(), sorted_.end(), t.vec().begin() + header);
  return t;
}

QuantileTransform QuantileTransform::deserialize(const Tensor& t) {
  QuantileTransform q;
  q.eps_ = t[0];
  q.n_train_ = static_cast<std::size_t>(t[1]);
  q.n_voxels_ = static_cast<std::size_t>(t[2]);
  q.constant_.resize(q.n_voxels_);
  for (std::size_t v = 0; v < q.n_voxels_; ++v)
    q.constant_[v] = static_cast<unsigned char>(t[3 + v]);
  const std::size_t g = static_cast<std::size_t>(t[3 + q.n_voxels_]);
  for (std::size_t i = 0; i < g; ++i)
    q.grid_.push_back(static_cast<std::size_t>(t[4 + q.n_voxels_ + i]));
  const std::size_t header = 4 + q.n_voxels_ + g;
  if (t.numel() != header + q.n_voxels_ * q.n_train_)
    throw std::invalid_argument("QuantileTransform::deserialize: size mismatch");
  q.sorted_.assign(t.vec().begin() + header, t.vec().end());
  return q;
}

}  // namespace npnorm
