#pragma once

#include <string>
#include <vector>

#include "downscale/config.hpp"
#include "downscale/grid.hpp"
#include "downscale/reslim.hpp"

namespace downscale {

// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitNumerical = 3,
  kExitDataMismatch = 4,
};

// Entry point shared by the executable and the tests. args excludes argv[0].
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

// Downscales a raw input grid with a trained model (tiled when the config
// asks for more than one tile) and returns the raw-unit prediction.
Grid predict_grid(ReslimModel<float>& model, const RunConfig& config, const Grid& input);

}  // namespace downscale
