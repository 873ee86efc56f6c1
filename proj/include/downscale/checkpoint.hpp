#pragma once

#include <string>
#include <vector>

#include "downscale/tensor.hpp"

namespace downscale {

// Parameter as stored on disk: float32 payload regardless of the in-memory
// scalar type.
struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// "ORBW" weights file: u32 version, u32 count, then per tensor a u16-length
// UTF-8 name, u8 rank, u32 extents and the float32 payload; a CRC-32 of all
// preceding bytes closes the file.
void write_checkpoint(const std::string& path, const std::vector<StoredTensor>& tensors);
std::vector<StoredTensor> read_checkpoint(const std::string& path);

template <typename T>
StoredTensor store(const std::string& name, const Tensor<T>& tensor) {
  return {name, tensor.shape(),
          std::vector<float>(tensor.values().begin(), tensor.values().end())};
}

}  // namespace downscale
