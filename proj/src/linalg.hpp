#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "engram_ar/tensor.hpp"

namespace engram_ar::detail {

/// y = x W for a row vector x and a row-major [in, out] matrix.
template <typename Real>
std::vector<Real> vec_mat(std::span<const Real> x, const Tensor<Real>& w) {
  using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
  if (x.size() != w.rows())
    throw ShapeError("vec_mat: vector of " + std::to_string(x.size()) + " against " + shape_string(w.shape()));
  std::vector<Real> y(w.cols());
  Eigen::Map<RowVec>(y.data(), static_cast<Eigen::Index>(y.size())).noalias() =
      Eigen::Map<const RowVec>(x.data(), static_cast<Eigen::Index>(x.size())) *
      Eigen::Map<const RowMat>(w.data(), static_cast<Eigen::Index>(w.rows()), static_cast<Eigen::Index>(w.cols()));
  return y;
}

}  // namespace engram_ar::detail
