#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "downscale/grid.hpp"
#include "downscale/image.hpp"

namespace downscale {

// Flat-value metrics over all pixels of equally sized inputs.
double r2(std::span<const double> pred, std::span<const double> truth);
double rmse(std::span<const double> pred, std::span<const double> truth);
// RMSE over pixels whose truth strictly exceeds its q-th percentile
// (linear interpolation between order statistics).
double rmse_quantile(std::span<const double> pred, std::span<const double> truth, double q);
double percentile(std::span<const double> values, double q);

std::vector<double> log1p_transform(std::span<const double> values);

// 11x11 Gaussian window (sigma 1.5), valid windows only; L = truth range.
double ssim(const ImageD& pred, const ImageD& truth);
// 10 log10(L^2 / MSE); +inf when MSE is zero.
double psnr(std::span<const double> pred, std::span<const double> truth);

struct Spectrum {
  std::vector<double> k;          // integer radial wavenumber per bin
  std::vector<double> power;      // mean |F|^2 / (HW)^2 in the bin
  std::vector<double> bin_total;  // summed power in the bin
  double fit_slope = 0;           // log-log least squares over k in [4, min(H,W)/4]
  double total() const;
};

Spectrum radial_power_spectrum(const ImageD& field);
// Least-squares slope of log power against log k over [k_lo, k_hi].
double fit_slope(const Spectrum& s, double k_lo, double k_hi);
// Mean squared log10-power difference over the fit band.
double log_spectrum_distance(const Spectrum& a, const Spectrum& b, double k_lo, double k_hi);
std::string spectrum_csv(const Spectrum& s);

enum class Transform { none, log1p };
std::string to_string(Transform t);
Transform transform_from_string(const std::string& s);

struct MetricsReport {
  double r2 = 0;
  double rmse = 0;
  double rmse_q68 = 0;
  double rmse_q95 = 0;
  double rmse_q997 = 0;
  double ssim = 0;
  double psnr = 0;
  Transform transform = Transform::none;
  std::size_t n_pixels = 0;
};

// Multi-channel grids: r2/rmse/quantiles/psnr over all pixels, ssim averaged
// over channels.
MetricsReport evaluate(const Grid& pred, const Grid& truth, Transform transform = Transform::none);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);

}  // namespace downscale
