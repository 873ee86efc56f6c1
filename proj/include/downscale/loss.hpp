#pragma once

#include <span>
#include <vector>

#include "downscale/tensor.hpp"

namespace downscale {

struct Grid;

struct TvPrior {
  double lambda = 1e-3;
  double delta = 1e-3;  // Huber smoothing width
};

// Per-row weights, mean exactly normalized to 1.
std::vector<double> lat_weights_from_latitudes(std::span<const double> latitudes_deg);
std::vector<double> lat_weights(const Grid& grid);
std::vector<double> uniform_lat_weights(std::size_t rows);

double huber(double a, double delta);

struct LossTerms {
  double data = 0;
  double prior = 0;
  double total() const { return data + prior; }
};

// data  = mean over (k, row, col) of w_row * (truth - pred)^2
// prior = lambda * mean over (k, i, j in 8-neighbourhood of i) of
//         b_ij * huber(|pred_i - pred_j|, delta), b = 1 axial, 1/sqrt(2) diagonal
// pred and truth are [K,H,W]; lat_weights has H entries.
template <typename T>
Tensor<T> bayesian_loss(const Tensor<T>& pred, const Tensor<T>& truth,
                        std::span<const double> lat_weights, const TvPrior& prior);

// Same objective evaluated in double without touching the graph.
template <typename T>
LossTerms bayesian_loss_terms(const Tensor<T>& pred, const Tensor<T>& truth,
                              std::span<const double> lat_weights, const TvPrior& prior);

}  // namespace downscale
