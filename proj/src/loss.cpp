#include "downscale/loss.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "downscale/detail/autograd.hpp"
#include "downscale/error.hpp"
#include "downscale/flops.hpp"
#include "downscale/grid.hpp"

namespace downscale {

using detail::grad_of;
using detail::make_result;
using detail::require;

namespace {

struct Offset {
  int dr;
  int dc;
  double b;
};

constexpr double kDiag = 1.0 / std::numbers::sqrt2;
constexpr Offset kNeighbours[8] = {{-1, -1, kDiag}, {-1, 0, 1.0}, {-1, 1, kDiag}, {0, -1, 1.0},
                                   {0, 1, 1.0},     {1, -1, kDiag}, {1, 0, 1.0},  {1, 1, kDiag}};

// Ordered in-bounds neighbour pairs over an H x W image.
std::size_t pair_count(std::size_t h, std::size_t w) {
  // axial: 2 * (h*(w-1) + (h-1)*w), diagonal: 4 * (h-1)*(w-1)
  return 2 * (h * (w - 1) + (h - 1) * w) + 4 * (h - 1) * (w - 1);
}

double huber_slope(double d, double delta) {
  return std::abs(d) <= delta ? d / delta : (d > 0 ? 1.0 : -1.0);
}

template <typename T>
void check_inputs(const Tensor<T>& pred, const Tensor<T>& truth, std::span<const double> lat_weights) {
  require(pred.rank() == 3, "bayesian_loss: pred must be [K,H,W], got " + to_string(pred.shape()));
  require(pred.shape() == truth.shape(), "bayesian_loss: pred " + to_string(pred.shape()) +
                                             " vs truth " + to_string(truth.shape()));
  require(lat_weights.size() == pred.dim(1), "bayesian_loss: " + std::to_string(lat_weights.size()) +
                                                 " latitude weights for " + std::to_string(pred.dim(1)) + " rows");
}

template <typename T>
LossTerms evaluate(std::span<const T> x, std::span<const T> y, std::size_t K, std::size_t H,
                   std::size_t W, std::span<const double> lw, const TvPrior& prior) {
  LossTerms terms;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < W; ++c) {
        const std::size_t i = (k * H + r) * W + c;
        const double e = static_cast<double>(y[i]) - static_cast<double>(x[i]);
        terms.data += lw[r] * e * e;
        if (prior.lambda == 0) continue;
        for (const auto& o : kNeighbours) {
          const long rr = static_cast<long>(r) + o.dr, cc = static_cast<long>(c) + o.dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(H) || cc >= static_cast<long>(W)) continue;
          const std::size_t j = (k * H + static_cast<std::size_t>(rr)) * W + static_cast<std::size_t>(cc);
          terms.prior += o.b * huber(std::abs(static_cast<double>(x[i]) - static_cast<double>(x[j])), prior.delta);
        }
      }
    }
  }
  terms.data /= static_cast<double>(K * H * W);
  const std::size_t pairs = K * pair_count(H, W);
  terms.prior = pairs == 0 ? 0.0 : prior.lambda * terms.prior / static_cast<double>(pairs);
  return terms;
}

}  // namespace

double huber(double a, double delta) {
  return a <= delta ? a * a / (2 * delta) : a - delta / 2;
}

std::vector<double> lat_weights_from_latitudes(std::span<const double> latitudes_deg) {
  std::vector<double> w(latitudes_deg.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(latitudes_deg[i] * std::numbers::pi / 180.0);
  const double m = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  if (!(m > 0)) throw ConfigError("latitude weights: rows average to a non-positive cosine");
  for (auto& v : w) v /= m;
  return w;
}

std::vector<double> lat_weights(const Grid& grid) {
  const auto lat = row_latitudes(grid);
  return lat_weights_from_latitudes(lat);
}

std::vector<double> uniform_lat_weights(std::size_t rows) { return std::vector<double>(rows, 1.0); }

template <typename T>
LossTerms bayesian_loss_terms(const Tensor<T>& pred, const Tensor<T>& truth,
                              std::span<const double> lat_weights, const TvPrior& prior) {
  check_inputs(pred, truth, lat_weights);
  return evaluate(pred.values(), truth.values(), pred.dim(0), pred.dim(1), pred.dim(2), lat_weights, prior);
}

template <typename T>
Tensor<T> bayesian_loss(const Tensor<T>& pred, const Tensor<T>& truth,
                        std::span<const double> lat_weights, const TvPrior& prior) {
  check_inputs(pred, truth, lat_weights);
  if (!(prior.delta > 0) || prior.lambda < 0) throw ConfigError("bayesian_loss: need delta > 0 and lambda >= 0");
  const std::size_t K = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
  const LossTerms terms = evaluate(pred.values(), truth.values(), K, H, W, lat_weights, prior);
  credit_flops(FlopCategory::other, pred.size() * 9);
  std::vector<double> lw(lat_weights.begin(), lat_weights.end());
  return make_result<T>(
      "bayesian_loss", {}, {static_cast<T>(terms.total())}, {pred.node_ptr(), truth.node_ptr()},
      [K, H, W, lw = std::move(lw), prior](Node<T>& self) {
        const double g = static_cast<double>(self.grad[0]);
        const auto& x = self.inputs[0]->value;
        const auto& y = self.inputs[1]->value;
        const double n = static_cast<double>(K * H * W);
        const std::size_t pairs = K * pair_count(H, W);
        const double tv_scale = pairs == 0 ? 0.0 : prior.lambda / static_cast<double>(pairs);
        T* gx = grad_of(self, 0);
        T* gy = grad_of(self, 1);
        for (std::size_t k = 0; k < K; ++k) {
          for (std::size_t r = 0; r < H; ++r) {
            for (std::size_t c = 0; c < W; ++c) {
              const std::size_t i = (k * H + r) * W + c;
              const double e = static_cast<double>(y[i]) - static_cast<double>(x[i]);
              const double d_data = 2.0 * lw[r] * e / n;
              if (gy) gy[i] += static_cast<T>(g * d_data);
              if (!gx) continue;
              double acc = -d_data;
              if (tv_scale != 0) {
                // Each unordered pair appears twice among ordered pairs.
                for (const auto& o : kNeighbours) {
                  const long rr = static_cast<long>(r) + o.dr, cc = static_cast<long>(c) + o.dc;
                  if (rr < 0 || cc < 0 || rr >= static_cast<long>(H) || cc >= static_cast<long>(W)) continue;
                  const std::size_t j = (k * H + static_cast<std::size_t>(rr)) * W + static_cast<std::size_t>(cc);
                  acc += 2.0 * tv_scale * o.b *
                         huber_slope(static_cast<double>(x[i]) - static_cast<double>(x[j]), prior.delta);
                }
              }
              gx[i] += static_cast<T>(g * acc);
            }
          }
        }
      });
}

#define DOWNSCALE_INSTANTIATE_LOSS(T)                                                                \
  template Tensor<T> bayesian_loss<T>(const Tensor<T>&, const Tensor<T>&, std::span<const double>, \
                                      const TvPrior&);                                              \
  template LossTerms bayesian_loss_terms<T>(const Tensor<T>&, const Tensor<T>&,                    \
                                            std::span<const double>, const TvPrior&);

DOWNSCALE_INSTANTIATE_LOSS(float)
DOWNSCALE_INSTANTIATE_LOSS(double)

}  // namespace downscale
