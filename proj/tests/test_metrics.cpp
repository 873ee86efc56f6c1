#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "downscale/error.hpp"
#include "downscale/grid.hpp"
#include "downscale/metrics.hpp"
#include "oracles.hpp"

using namespace downscale;

namespace {

std::vector<double> randoms(std::size_t n, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

ImageD image(const std::vector<double>& v, Eigen::Index h, Eigen::Index w) {
  return Eigen::Map<const ImageD>(v.data(), h, w);
}

std::vector<std::vector<double>> rows(const std::vector<double>& v, int h, int w) {
  std::vector<std::vector<double>> out(h, std::vector<double>(w));
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) out[r][c] = v[r * w + c];
  return out;
}

}  // namespace

TEST_CASE("r2 and rmse") {
  const std::vector<double> t{1, 2, 3, 4, 5, 6, 7, 8, 10};
  const std::vector<double> p{1.5, 2, 2.5, 4, 5.5, 6, 7.25, 8, 9};
  CHECK(r2(t, t) == 1.0);
  const double m = oracle::mean(t);
  CHECK(r2(std::vector<double>(9, m), t) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(std::abs(r2(p, t) - oracle::r2(p, t)) <= 1e-12);
  CHECK(std::abs(rmse(p, t) - oracle::rmse(p, t)) <= 1e-12);
  CHECK_THROWS_AS(r2(t, std::vector<double>(9, 1.0)), NumericalError);

  // shift invariance
  std::vector<double> ps = p, ts = t;
  for (auto& v : ps) v += 100;
  for (auto& v : ts) v += 100;
  CHECK(r2(ps, ts) == doctest::Approx(r2(p, t)).epsilon(1e-10));
  CHECK(rmse(ps, ts) == doctest::Approx(rmse(p, t)).epsilon(1e-10));
}

TEST_CASE("quantile rmse") {
  const auto t = randoms(100, 1, 0, 10), p = randoms(100, 2, 0, 10);
  CHECK(std::abs(rmse_quantile(p, t, 95) - oracle::rmse_quantile(p, t, 95)) <= 1e-12);
  CHECK(rmse_quantile(t, t, 68) == 0.0);

  // q = 0 drops only the minimum when values are distinct
  const std::size_t argmin = static_cast<std::size_t>(std::min_element(t.begin(), t.end()) - t.begin());
  std::vector<double> pt, tt;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (i != argmin) pt.push_back(p[i]), tt.push_back(t[i]);
  CHECK(rmse_quantile(p, t, 0) == doctest::Approx(oracle::rmse(pt, tt)).epsilon(1e-12));

  // errors growing with truth make the statistic grow with q
  std::vector<double> pred(t);
  for (std::size_t i = 0; i < t.size(); ++i) pred[i] = t[i] * 1.1;
  CHECK(rmse_quantile(pred, t, 68) <= rmse_quantile(pred, t, 95));
  CHECK(rmse_quantile(pred, t, 95) <= rmse_quantile(pred, t, 99.7));
  CHECK_THROWS_AS(rmse_quantile(p, std::vector<double>(100, 1.0), 50), NumericalError);
  CHECK_THROWS_AS(rmse_quantile(p, t, 100), ConfigError);
}

TEST_CASE("log1p transform") {
  const std::vector<double> v{0.0, std::exp(1.0) - 1};
  const auto out = log1p_transform(v);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == doctest::Approx(1.0).epsilon(1e-15));
  const auto r = randoms(50, 3, 0, 20);
  const auto back = log1p_transform(r);
  for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::abs(std::expm1(back[i]) - r[i]) <= 1e-7);
  CHECK_THROWS_AS(log1p_transform(std::vector<double>{-0.5}), NumericalError);
}

TEST_CASE("ssim") {
  const auto a = randoms(256, 4), b = randoms(256, 5);
  const ImageD x = image(a, 16, 16), y = image(b, 16, 16);
  CHECK(ssim(x, x) == 1.0);
  CHECK(std::abs(ssim(x, y) - oracle::ssim(rows(a, 16, 16), rows(b, 16, 16))) <= 1e-6);
  CHECK(ssim(x + 50.0, x) < 1.0);
  // symmetric when both images share a dynamic range
  const ImageD flipped = x.colwise().reverse();
  CHECK(ssim(x, flipped) == doctest::Approx(ssim(flipped, x)).epsilon(1e-12));
  CHECK_THROWS_AS(ssim(ImageD::Zero(8, 8), ImageD::Zero(8, 8)), ShapeError);
}

TEST_CASE("psnr") {
  const auto t = randoms(64, 6, 0, 4), p = randoms(64, 7, 0, 4);
  CHECK(std::isinf(psnr(t, t)));
  CHECK(std::abs(psnr(p, t) - oracle::psnr(p, t)) <= 1e-9);
  // MSE equal to L^2 gives 0 dB
  const std::vector<double> truth{0, 1, 0, 1}, pred{1, 0, 1, 0};
  CHECK(psnr(pred, truth) == doctest::Approx(0.0));
}

TEST_CASE("radial power spectrum") {
  SUBCASE("sinusoid puts its power in one bin") {
    ImageD f(64, 64);
    for (int r = 0; r < 64; ++r)
      for (int c = 0; c < 64; ++c) f(r, c) = std::sin(2 * M_PI * 8 * c / 64.0);
    const Spectrum s = radial_power_spectrum(f);
    const auto peak = std::max_element(s.power.begin(), s.power.end()) - s.power.begin();
    CHECK(s.k[peak] == 8.0);
    CHECK(s.bin_total[peak] / s.total() > 0.999);
  }
  SUBCASE("white noise is flat") {
    double mean_slope = 0;
    for (int seed = 0; seed < 10; ++seed) {
      const auto v = randoms(128 * 128, 100 + seed);
      mean_slope += radial_power_spectrum(image(v, 128, 128)).fit_slope / 10;
    }
    CHECK(std::abs(mean_slope) <= 0.2);
  }
  SUBCASE("Parseval") {
    const Grid g = synth_grf(64, 64, 1, -2.0, 3);
    const ImageD f = g.channels[0].cast<double>();
    const double var = (f - f.mean()).square().mean();
    const Spectrum s = radial_power_spectrum(f);
    CHECK(std::abs(s.total() - var) <= 0.02 * var);
    for (std::size_t i = 1; i < s.k.size(); ++i) CHECK(s.k[i] > s.k[i - 1]);
    for (double p : s.power) CHECK(p >= 0);
  }
  SUBCASE("small fields are rejected") { CHECK_THROWS_AS(radial_power_spectrum(ImageD::Zero(8, 32)), ShapeError); }
}

TEST_CASE("evaluate") {
  const Grid g = synth_grf(32, 32, 2, -3.0, 9);
  const MetricsReport same = evaluate(g, g);
  CHECK(same.r2 == 1.0);
  CHECK(same.rmse == 0.0);
  CHECK(same.ssim == 1.0);
  CHECK(std::isinf(same.psnr));
  CHECK(same.n_pixels == 2u * 32u * 32u);

  Grid noisy = g;
  noisy.channels[1](3, 3) += 1.0f;
  const MetricsReport r = evaluate(noisy, g);
  const MetricsReport back = report_from_json(report_to_json(r));
  CHECK(back.r2 == r.r2);
  CHECK(back.rmse_q997 == r.rmse_q997);
  CHECK(back.ssim == r.ssim);
  CHECK(back.n_pixels == r.n_pixels);
  CHECK(std::isinf(report_from_json(report_to_json(same)).psnr));

  Grid rain = g;
  for (auto& ch : rain.channels) ch = ch.abs();
  CHECK(evaluate(rain, rain, Transform::log1p).transform == Transform::log1p);
  CHECK_THROWS_AS(evaluate(g, coarsen(g, 2)), ShapeError);
}
