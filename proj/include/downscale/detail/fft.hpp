#pragma once

#include <complex>

#include <Eigen/Core>

namespace downscale::detail {

using ComplexImage =
    Eigen::Array<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unnormalized forward transform; inverse carries the 1/(H*W) factor.
ComplexImage fft2(const ComplexImage& in);
ComplexImage ifft2(const ComplexImage& in);

// Signed integer frequency of bin j on an axis of length n.
inline long signed_frequency(long j, long n) { return j <= n / 2 ? j : j - n; }

}  // namespace downscale::detail
