#pragma once

#include <Eigen/Dense>

#include <compare>
#include <cstdint>
#include <string>

namespace spd {

/// Row-major dense matrix; attention maps are processed row by row.
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Real = double;
using Matrix = RowMatrix<Real>;
using Vector = ColVector<Real>;

/// Binary mask over the positions of a latent grid, row-major (i = y * w + x).
using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

/// Spatial layout of a latent feature map.
struct Grid {
  int w = 0;
  int h = 0;

  constexpr int size() const { return w * h; }
  constexpr int index(int x, int y) const { return y * w + x; }
  auto operator<=>(const Grid&) const = default;
};

inline std::string to_string(Grid g) {
  return std::to_string(g.w) + "x" + std::to_string(g.h);
}

}  // namespace spd
