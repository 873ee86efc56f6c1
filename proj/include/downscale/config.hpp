#pragma once

#include <cstdint>
#include <string>

#include "downscale/metrics.hpp"
#include "downscale/reslim.hpp"

namespace downscale {

// Everything a training/eval run needs. Parsed from an INI file with
// sections [model], [compression], [loss], [train], [data], [eval]; unknown
// sections or keys are ConfigErrors.
struct RunConfig {
  ReslimConfig model;
  bool norm_from_data = true;  // norm_mean/norm_std absent: fit on training inputs
  std::size_t tile_rows = 1;
  std::size_t tile_cols = 1;
  std::size_t halo = 4;  // input pixels, default 2 * patch_size
  std::size_t workers = 1;
  std::size_t batch_size = 4;
  std::size_t steps = 100;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0 = only at the end
  std::string data_dir = "data";
  std::string out_dir = "run";
  double train_fraction = 0.75;  // leading manifest pairs used for training
  Transform transform = Transform::none;

  void validate() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string format_run_config(const RunConfig& config);

}  // namespace downscale
