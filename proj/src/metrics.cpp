#include "downscale/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "downscale/detail/fft.hpp"
#include "downscale/error.hpp"

namespace downscale {

namespace {

void require_pair(std::span<const double> pred, std::span<const double> truth, const char* what) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(pred.size()) + " predictions vs " +
                     std::to_string(truth.size()) + " truth values");
  }
}

double dynamic_range(std::span<const double> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi - *lo;
}

std::vector<double> gaussian_window(int radius, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i) w[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= s;
  return w;
}

// Separable valid-mode filtering.
ImageD filter_valid(const ImageD& img, const std::vector<double>& w) {
  const Eigen::Index k = static_cast<Eigen::Index>(w.size());
  const Eigen::Index h = img.rows(), wd = img.cols();
  ImageD rows(h, wd - k + 1);
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c + k <= wd; ++c) {
      double acc = 0;
      for (Eigen::Index i = 0; i < k; ++i) acc += w[static_cast<std::size_t>(i)] * img(r, c + i);
      rows(r, c) = acc;
    }
  }
  ImageD out(h - k + 1, wd - k + 1);
  for (Eigen::Index r = 0; r + k <= h; ++r) {
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      double acc = 0;
      for (Eigen::Index i = 0; i < k; ++i) acc += w[static_cast<std::size_t>(i)] * rows(r + i, c);
      out(r, c) = acc;
    }
  }
  return out;
}

std::vector<double> flatten(const Grid& g) {
  std::vector<double> v;
  v.reserve(g.channel_count() * g.height() * g.width());
  for (const auto& ch : g.channels) {
    for (Eigen::Index i = 0; i < ch.size(); ++i) v.push_back(static_cast<double>(ch.data()[i]));
  }
  return v;
}

}  // namespace

double r2(std::span<const double> pred, std::span<const double> truth) {
  require_pair(pred, truth, "r2");
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot == 0) throw NumericalError("r2: truth is constant");
  return 1.0 - ss_res / ss_tot;
}

double rmse(std::span<const double> pred, std::span<const double> truth) {
  require_pair(pred, truth, "rmse");
  double sq = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) sq += (truth[i] - pred[i]) * (truth[i] - pred[i]);
  return std::sqrt(sq / static_cast<double>(truth.size()));
}

double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw ShapeError("percentile: no values");
  if (!(q >= 0 && q <= 100)) throw ConfigError("percentile: q must lie in [0, 100]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

double rmse_quantile(std::span<const double> pred, std::span<const double> truth, double q) {
  require_pair(pred, truth, "rmse_quantile");
  if (!(q >= 0 && q < 100)) throw ConfigError("rmse_quantile: q must lie in [0, 100)");
  const double threshold = percentile(truth, q);
  double sq = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] > threshold) {
      sq += (truth[i] - pred[i]) * (truth[i] - pred[i]);
      ++n;
    }
  }
  if (n == 0) throw NumericalError("rmse_quantile: no pixel exceeds the percentile (constant truth?)");
  return std::sqrt(sq / static_cast<double>(n));
}

std::vector<double> log1p_transform(std::span<const double> values) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] < 0) throw NumericalError("log1p_transform: negative value " + std::to_string(values[i]));
    out[i] = std::log1p(values[i]);
  }
  return out;
}

double ssim(const ImageD& pred, const ImageD& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) throw ShapeError("ssim: shape mismatch");
  constexpr int radius = 5;
  if (truth.rows() < 2 * radius + 1 || truth.cols() < 2 * radius + 1) {
    throw ShapeError("ssim: image smaller than the 11x11 window");
  }
  const std::span<const double> tv(truth.data(), static_cast<std::size_t>(truth.size()));
  const double L = dynamic_range(tv);
  const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
  const auto w = gaussian_window(radius, 1.5);
  const ImageD mx = filter_valid(pred, w), my = filter_valid(truth, w);
  const ImageD sxx = filter_valid(pred * pred, w) - mx * mx;
  const ImageD syy = filter_valid(truth * truth, w) - my * my;
  const ImageD sxy = filter_valid(pred * truth, w) - mx * my;
  const ImageD num = (2 * mx * my + c1) * (2 * sxy + c2);
  const ImageD den = (mx * mx + my * my + c1) * (sxx + syy + c2);
  ImageD map(num.rows(), num.cols());
  for (Eigen::Index i = 0; i < map.size(); ++i) {
    // 0/0 only happens for identical constant windows with L = 0.
    map.data()[i] = den.data()[i] == 0 ? 1.0 : num.data()[i] / den.data()[i];
  }
  return map.mean();
}

double psnr(std::span<const double> pred, std::span<const double> truth) {
  require_pair(pred, truth, "psnr");
  const double e = rmse(pred, truth);
  if (e == 0) return std::numeric_limits<double>::infinity();
  const double L = dynamic_range(truth);
  return 10.0 * std::log10(L * L / (e * e));
}

double Spectrum::total() const { return std::accumulate(bin_total.begin(), bin_total.end(), 0.0); }

Spectrum radial_power_spectrum(const ImageD& field) {
  const Eigen::Index h = field.rows(), w = field.cols();
  if (h < 16 || w < 16) throw ShapeError("radial_power_spectrum: field must be at least 16x16");
  const ImageD centered = field - field.mean();
  const detail::ComplexImage F = detail::fft2(detail::ComplexImage(centered.cast<std::complex<double>>()));
  const double norm = static_cast<double>(h * w) * static_cast<double>(h * w);
  const auto kmax = static_cast<std::size_t>(std::ceil(std::hypot(static_cast<double>(h / 2), static_cast<double>(w / 2)))) + 1;
  std::vector<double> total(kmax + 1, 0.0);
  std::vector<std::size_t> count(kmax + 1, 0);
  for (Eigen::Index r = 0; r < h; ++r) {
    const double ky = static_cast<double>(detail::signed_frequency(r, h));
    for (Eigen::Index c = 0; c < w; ++c) {
      const double kx = static_cast<double>(detail::signed_frequency(c, w));
      const auto k = static_cast<std::size_t>(std::lround(std::hypot(kx, ky)));
      total[k] += std::norm(F(r, c)) / norm;
      ++count[k];
    }
  }
  Spectrum s;
  for (std::size_t k = 0; k <= kmax; ++k) {
    if (count[k] == 0) continue;
    s.k.push_back(static_cast<double>(k));
    s.bin_total.push_back(total[k]);
    s.power.push_back(total[k] / static_cast<double>(count[k]));
  }
  s.fit_slope = fit_slope(s, 4.0, static_cast<double>(std::min(h, w)) / 4.0);
  return s;
}

double fit_slope(const Spectrum& s, double k_lo, double k_hi) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.k.size(); ++i) {
    if (s.k[i] < k_lo || s.k[i] > k_hi || !(s.power[i] > 0)) continue;
    const double x = std::log(s.k[i]), y = std::log(s.power[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  const double dn = static_cast<double>(n);
  return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

double log_spectrum_distance(const Spectrum& a, const Spectrum& b, double k_lo, double k_hi) {
  if (a.k != b.k) throw ShapeError("log_spectrum_distance: spectra have different bins");
  double sq = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.k.size(); ++i) {
    if (a.k[i] < k_lo || a.k[i] > k_hi || !(a.power[i] > 0) || !(b.power[i] > 0)) continue;
    const double d = std::log10(a.power[i]) - std::log10(b.power[i]);
    sq += d * d;
    ++n;
  }
  return n == 0 ? 0.0 : sq / static_cast<double>(n);
}

std::string spectrum_csv(const Spectrum& s) {
  std::ostringstream out;
  out.precision(10);
  out << "k,power\n";
  for (std::size_t i = 0; i < s.k.size(); ++i) out << s.k[i] << ',' << s.power[i] << '\n';
  return out.str();
}

std::string to_string(Transform t) { return t == Transform::log1p ? "log1p" : "none"; }

Transform transform_from_string(const std::string& s) {
  if (s == "none") return Transform::none;
  if (s == "log1p") return Transform::log1p;
  throw ConfigError("unknown transform '" + s + "' (expected none or log1p)");
}

MetricsReport evaluate(const Grid& pred, const Grid& truth, Transform transform) {
  if (pred.channel_count() != truth.channel_count() || pred.height() != truth.height() ||
      pred.width() != truth.width()) {
    throw ShapeError("evaluate: prediction and truth grids differ in shape");
  }
  std::vector<double> p = flatten(pred), t = flatten(truth);
  if (transform == Transform::log1p) {
    p = log1p_transform(p);
    t = log1p_transform(t);
  }
  MetricsReport rep;
  rep.transform = transform;
  rep.n_pixels = t.size();
  rep.r2 = r2(p, t);
  rep.rmse = rmse(p, t);
  rep.rmse_q68 = rmse_quantile(p, t, 68.0);
  rep.rmse_q95 = rmse_quantile(p, t, 95.0);
  rep.rmse_q997 = rmse_quantile(p, t, 99.7);
  rep.psnr = psnr(p, t);
  const std::size_t plane = truth.height() * truth.width();
  const auto h = static_cast<Eigen::Index>(truth.height()), w = static_cast<Eigen::Index>(truth.width());
  double s = 0;
  for (std::size_t c = 0; c < truth.channel_count(); ++c) {
    const ImageD a = Eigen::Map<const ImageD>(p.data() + c * plane, h, w);
    const ImageD b = Eigen::Map<const ImageD>(t.data() + c * plane, h, w);
    s += ssim(a, b);
  }
  rep.ssim = s / static_cast<double>(truth.channel_count());
  return rep;
}

namespace {

nlohmann::json number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double from_number(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw FormatError("metrics json: unexpected string value " + s);
  }
  return j.get<double>();
}

}  // namespace

std::string report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["r2"] = number(r.r2);
  j["rmse"] = number(r.rmse);
  j["rmse_q68"] = number(r.rmse_q68);
  j["rmse_q95"] = number(r.rmse_q95);
  j["rmse_q997"] = number(r.rmse_q997);
  j["ssim"] = number(r.ssim);
  j["psnr"] = number(r.psnr);
  j["transform"] = to_string(r.transform);
  j["n_pixels"] = r.n_pixels;
  return j.dump(2);
}

MetricsReport report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.r2 = from_number(j.at("r2"));
    r.rmse = from_number(j.at("rmse"));
    r.rmse_q68 = from_number(j.at("rmse_q68"));
    r.rmse_q95 = from_number(j.at("rmse_q95"));
    r.rmse_q997 = from_number(j.at("rmse_q997"));
    r.ssim = from_number(j.at("ssim"));
    r.psnr = from_number(j.at("psnr"));
    r.transform = transform_from_string(j.at("transform").get<std::string>());
    r.n_pixels = j.at("n_pixels").get<std::size_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics json: ") + e.what());
  }
}

}  // namespace downscale
