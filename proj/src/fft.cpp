#include "downscale/detail/fft.hpp"

#include <unsupported/Eigen/FFT>

#include <vector>

namespace downscale::detail {

namespace {

ComplexImage transform(const ComplexImage& in, bool inverse) {
  Eigen::FFT<double> fft;
  const Eigen::Index h = in.rows(), w = in.cols();
  ComplexImage out(h, w);
  std::vector<std::complex<double>> src, dst;
  src.resize(static_cast<std::size_t>(w));
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) src[static_cast<std::size_t>(c)] = in(r, c);
    if (inverse) fft.inv(dst, src); else fft.fwd(dst, src);
    for (Eigen::Index c = 0; c < w; ++c) out(r, c) = dst[static_cast<std::size_t>(c)];
  }
  src.resize(static_cast<std::size_t>(h));
  for (Eigen::Index c = 0; c < w; ++c) {
    for (Eigen::Index r = 0; r < h; ++r) src[static_cast<std::size_t>(r)] = out(r, c);
    if (inverse) fft.inv(dst, src); else fft.fwd(dst, src);
    for (Eigen::Index r = 0; r < h; ++r) out(r, c) = dst[static_cast<std::size_t>(r)];
  }
  return out;
}

}  // namespace

ComplexImage fft2(const ComplexImage& in) { return transform(in, false); }
ComplexImage ifft2(const ComplexImage& in) { return transform(in, true); }

}  // namespace downscale::detail
