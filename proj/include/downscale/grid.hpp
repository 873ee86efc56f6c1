#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "downscale/image.hpp"
#include "downscale/tensor.hpp"

namespace downscale {

// Georeferenced multi-channel raster. Row 0 is the northern edge (lat_max).
struct Grid {
  std::vector<std::string> channel_names;
  double lat_min = -90.0;
  double lat_max = 90.0;
  double lon_min = -180.0;
  double lon_max = 180.0;
  std::vector<ImageF> channels;

  std::size_t height() const { return channels.empty() ? 0 : static_cast<std::size_t>(channels[0].rows()); }
  std::size_t width() const { return channels.empty() ? 0 : static_cast<std::size_t>(channels[0].cols()); }
  std::size_t channel_count() const { return channels.size(); }

  // Throws ShapeError / NumericalError / ConfigError on any invariant breach.
  void validate() const;
};

// ORBG layout (little-endian): "ORB2", u32 version=1, u32 height, width,
// channels, f64 lat_min, lat_max, lon_min, lon_max, 32-byte zero-padded
// names, u32 CRC-32 of the payload, float32 payload channel-major then
// row-major.
void write_grid(const Grid& grid, const std::string& path);
Grid read_grid(const std::string& path);

// Block mean over factor x factor cells; geo-spans are kept.
Grid coarsen(const Grid& fine, std::size_t factor);

// Gaussian random field with isotropic power ~ k^spectral_slope, unit
// variance per channel, channels independent. Pure function of its inputs.
Grid synth_grf(std::size_t height, std::size_t width, std::size_t channels,
               double spectral_slope, std::uint64_t seed);

struct PairManifest {
  std::vector<std::pair<std::string, std::string>> pairs;  // (input, target), relative
  std::size_t scale_factor = 4;
  std::uint64_t seed = 0;
};

struct GeneratorSpec {
  std::size_t height = 128;  // fine grid
  std::size_t width = 128;
  std::size_t channels = 1;
  double spectral_slope = -3.0;
  std::uint64_t seed = 0;
};

// Writes count fine/coarse pairs plus manifest.json into out_dir.
PairManifest make_pairs(const std::string& out_dir, std::size_t count,
                        std::size_t scale_factor, const GeneratorSpec& spec);

void write_manifest(const PairManifest& manifest, const std::string& path);
PairManifest read_manifest(const std::string& path);

// Channel-major [C,H,W] tensor view of a grid and back. The returned grid
// copies geometry (spans) from like.
template <typename T>
Tensor<T> to_tensor(const Grid& grid);
template <typename T>
Grid to_grid(const Tensor<T>& tensor, const Grid& like,
             std::vector<std::string> channel_names = {});

// Latitude of each row center, north to south.
std::vector<double> row_latitudes(const Grid& grid);

// Deterministic seed stream used by the generators.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace downscale
