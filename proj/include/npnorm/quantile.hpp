#pragma once

#include <string>
#include <vector>

#include "npnorm/tensor.hpp"

namespace npnorm {

// Per-voxel empirical CDF transform: apply maps values to interpolated
// rank positions (r - 0.5)/n clipped to [eps, 1-eps]; invert is the
// interpolated empirical quantile function. Fit on training data only.
class QuantileTransform {
 public:
  static QuantileTransform fit(const Tensor& Y_train, double eps = 1e-3);

  Tensor apply(const Tensor& Y) const;
  Tensor invert(const Tensor& U) const;

  double apply_one(std::size_t voxel, double y) const;
  double invert_one(std::size_t voxel, double u) const;

  std::size_t n_voxels() const { return n_voxels_; }
  std::size_t n_train() const { return n_train_; }
  double eps() const { return eps_; }
  bool constant_voxel(std::size_t v) const { return constant_[v] != 0; }

  // Flattened into a single tensor for NPNT persistence: row 0 holds
  // (eps, n_train, n_voxels, constant flags...), rest are sorted values.
  Tensor serialize() const;
  static QuantileTransform deserialize(const Tensor& t);

 private:
  std::size_t n_voxels_ = 0;
  std::size_t n_train_ = 0;
  double eps_ = 1e-3;
  std::vector<double> sorted_;      // (n_voxels, n_train), per-voxel ascending
  std::vector<unsigned char> constant_;
  std::vector<std::size_t> grid_;   // trailing shape of fitted Y
};

}  // namespace npnorm
