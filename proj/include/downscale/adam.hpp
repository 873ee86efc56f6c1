#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "downscale/tensor.hpp"

namespace downscale {

template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

// One bias-corrected Adam update over params, in order; gradients are zeroed
// afterwards. Throws GraphError if a parameter carries no gradient buffer and
// ShapeError if params no longer match the moment buffers.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state);

}  // namespace downscale
