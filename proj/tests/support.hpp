#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "downscale/ops.hpp"
#include "downscale/tensor.hpp"

namespace testing {

using downscale::Shape;
using downscale::Tensor;

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(downscale::numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>::from_values(std::move(shape), std::move(v), requires_grad);
}

// Scalar loss <out, r> with a fixed random r, so every output element gets
// a distinct cotangent.
inline Tensor<double> project(const Tensor<double>& out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  const Tensor<double> r = random_tensor(out.shape(), rng, -1.0, 1.0, false);
  return downscale::sum(downscale::mul(out, r));
}

struct GradCheck {
  double max_abs = 0;  // max |analytic - numeric|
  double max_rel = 0;  // max |a - n| / max(|a|, |n|, floor)
  std::size_t checked = 0;
};

// Five-point central differences on every element of every leaf. f builds a
// scalar loss from the leaves (it is re-run for each perturbation).
inline GradCheck gradient_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> leaves,
                                double h = 1e-5, double rel_floor = 1e-4) {
  for (auto& l : leaves) l.zero_grad();
  downscale::backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());

  downscale::NoGradGuard no_grad;
  GradCheck out;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto values = leaves[i].mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double keep = values[j];
      auto at = [&](double d) {
        values[j] = keep + d;
        return f().item();
      };
      const double numeric = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
      values[j] = keep;
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric);
      out.max_abs = std::max(out.max_abs, err);
      out.max_rel = std::max(out.max_rel, err / std::max({std::abs(a), std::abs(numeric), rel_floor}));
      ++out.checked;
    }
  }
  return out;
}

// Unique scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  static std::uint64_t counter = 0;
  std::random_device rd;
  const auto dir = std::filesystem::temp_directory_path() /
                   ("downscale_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
