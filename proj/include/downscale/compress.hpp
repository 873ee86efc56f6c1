#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "downscale/image.hpp"
#include "downscale/tensor.hpp"

namespace downscale {

struct CannyParams {
  double sigma = 1.0;
  double low_frac = 0.10;
  double high_frac = 0.20;
};

struct EdgeMap {
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> edges;
  CannyParams params;

  std::size_t height() const { return static_cast<std::size_t>(edges.rows()); }
  std::size_t width() const { return static_cast<std::size_t>(edges.cols()); }
  std::size_t count() const { return static_cast<std::size_t>(edges.count()); }
};

// Gaussian blur, Sobel, 4-direction non-maximum suppression, hysteresis
// against low/high fractions of the largest gradient magnitude.
EdgeMap canny(const ImageD& image, const CannyParams& params = {});

struct Patch {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t side = 0;
  friend bool operator==(const Patch&, const Patch&) = default;
};

struct PatchSet {
  std::vector<Patch> patches;  // sorted by (row, col)
  std::size_t height = 0;      // padded extent
  std::size_t width = 0;
  std::size_t orig_height = 0;
  std::size_t orig_width = 0;
  std::size_t min_side = 1;
  std::size_t max_side = 1;
  double threshold = 0.05;

  std::size_t size() const { return patches.size(); }
  // Number of scale-embedding rows: floor(log2(max/min)) + 1.
  std::size_t scale_levels() const;
  std::size_t scale_index(const Patch& p) const;
  friend bool operator==(const PatchSet&, const PatchSet&) = default;
};

struct CompressionSettings {
  std::size_t min_side = 1;
  std::size_t max_side = 4;
  double threshold = 0.05;
};

// Splits every max_side cell while its edge density is strictly above the
// threshold and its side exceeds min_side. Edge map extents must be
// multiples of max_side.
PatchSet quadtree_partition(const EdgeMap& edges, std::size_t min_side,
                            std::size_t max_side, double density_threshold);

// Every cell at a single side; what compression reduces to when disabled.
PatchSet uniform_patches(std::size_t height, std::size_t width, std::size_t side);

double compression_ratio(const PatchSet& ps, std::size_t uniform_side);

// Round up to the next multiple of side.
std::size_t padded_extent(std::size_t n, std::size_t side);

// Replicate-pads image bottom/right to multiples of max_side, runs canny and
// the partition; orig_height/orig_width record the unpadded extent.
PatchSet partition_image(const ImageD& image, const CompressionSettings& settings,
                         const CannyParams& canny_params = {});

std::string patchset_to_json(const PatchSet& ps);
PatchSet patchset_from_json(const std::string& text);

// Average-pools each patch of x [C,Hp,Wp] to min_side x min_side:
// -> [n, C*m*m], features ordered (channel, row, col).
template <typename T>
Tensor<T> patch_pool(const Tensor<T>& x, const PatchSet& ps);

// Inverse placement: x [n, C*m*m] -> [C, Hp, Wp], each m x m block
// nearest-neighbour broadcast over its patch.
template <typename T>
Tensor<T> patch_broadcast(const Tensor<T>& x, const PatchSet& ps, std::size_t channels);

template <typename T>
struct TokenizerWeights {
  Tensor<T> weight;           // [C*m*m, dim]
  Tensor<T> bias;             // [dim]
  Tensor<T> scale_embedding;  // [levels, dim]
};

template <typename T>
struct DetokenizerWeights {
  Tensor<T> weight;       // [dim, C*m*m]
  Tensor<T> bias;         // [C*m*m]
  Tensor<T> smooth;       // [C, C, 3, 3]
  Tensor<T> smooth_bias;  // [C]
};

// feature_image [C,Hp,Wp] -> tokens [n, dim] in patch order.
template <typename T>
Tensor<T> tokenize(const Tensor<T>& feature_image, const PatchSet& ps,
                   const TokenizerWeights<T>& w);

// tokens [n, dim] -> [C, orig_height, orig_width].
template <typename T>
Tensor<T> detokenize(const Tensor<T>& tokens, const PatchSet& ps,
                     const DetokenizerWeights<T>& w, std::size_t channels);

}  // namespace downscale
