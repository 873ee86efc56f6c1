#pragma once

#include <Eigen/Core>

namespace downscale {

// Single-channel raster, row-major, row 0 = north.
template <typename T>
using Image = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ImageF = Image<float>;
using ImageD = Image<double>;

}  // namespace downscale
