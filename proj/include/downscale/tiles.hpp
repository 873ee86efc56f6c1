#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "downscale/adam.hpp"
#include "downscale/flops.hpp"
#include "downscale/reslim.hpp"
#include "downscale/tensor.hpp"

namespace downscale {

struct Rect {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t area() const { return height * width; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

struct TileLayout {
  std::size_t height = 0;  // input image
  std::size_t width = 0;
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::size_t halo = 0;  // input pixels
  std::size_t patch = 1;
  std::size_t scale = 1;
  std::vector<Rect> cores;   // row-major tile order
  std::vector<Rect> padded;  // core grown by halo, clamped to the image

  std::size_t count() const { return cores.size(); }
  Rect output_core(std::size_t tile) const;
  // Extent of an extracted tile (core plus the full halo on every side).
  std::size_t tile_height(std::size_t tile) const { return cores.at(tile).height + 2 * halo; }
  std::size_t tile_width(std::size_t tile) const { return cores.at(tile).width + 2 * halo; }
};

// Splits the patch grid into t_rows x t_cols tiles; when the split is uneven
// the leading tiles take one extra patch row/column.
TileLayout plan_tiles(std::size_t height, std::size_t width, std::size_t t_rows,
                      std::size_t t_cols, std::size_t halo, std::size_t patch,
                      std::size_t scale);

// Padded rectangle of input [C,H,W], replicate-padded where it was clamped,
// so every tile is (core + 2*halo) on both axes.
template <typename T>
Tensor<T> extract_tile(const Tensor<T>& input, const TileLayout& layout, std::size_t tile);

// Crops each tile output to its core and places it: -> [K, sH, sW].
template <typename T>
Tensor<T> stitch(const std::vector<Tensor<T>>& tile_outputs, const TileLayout& layout);

struct WorkerReport {
  std::size_t worker = 0;
  std::size_t tile = 0;
  std::size_t sample = 0;
  std::size_t tokens = 0;  // sequence length seen by attention
  double loss = 0;
  double grad_norm = 0;
  FlopLedger flops;
  double wall_ms = 0;
};

template <typename T>
struct TiledOutput {
  Tensor<T> output;
  std::vector<WorkerReport> reports;  // one per tile, tile order
};

// Runs every tile through reslim_forward on `workers` threads and stitches
// the cores. Per-tile FLOPs are credited to the caller's scope in tile order.
template <typename T>
TiledOutput<T> tiled_forward(const Tensor<T>& input, ReslimModel<T>& model,
                             const TileLayout& layout, std::size_t workers = 1);

struct TiledStep {
  double loss = 0;
  std::vector<WorkerReport> reports;  // one per (sample, tile)
};

// Each replica accumulates the gradient of
//   sum over its (sample, tile) items of  W * (core_pixels / N) / B * loss_core
// then the gradients are averaged in worker order and written back to every
// replica. Items are dealt round-robin over replicas.
template <typename T>
TiledStep tiled_gradients(std::span<const Sample<T>> batch,
                          std::vector<ReslimModel<T>>& replicas, const TileLayout& layout);

// tiled_gradients plus an identical Adam update on every replica. Throws
// NumericalError when replica hashes disagree afterwards.
template <typename T>
TiledStep tiled_train_step(std::span<const Sample<T>> batch,
                           std::vector<ReslimModel<T>>& replicas,
                           std::vector<AdamState<T>>& optimizers, const TileLayout& layout);

// RMSE between two [K,sH,sW] outputs restricted to output pixels within
// `band` pixels of an internal core boundary. Zero when there are none.
template <typename T>
double seam_rmse(const Tensor<T>& tiled, const Tensor<T>& reference,
                 const TileLayout& layout, std::size_t band);

}  // namespace downscale
