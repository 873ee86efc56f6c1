#pragma once

#include <cstdint>
#include <span>

namespace downscale {

// CRC-32 (IEEE 802.3 polynomial), as produced by zlib.
std::uint32_t crc32(std::span<const std::byte> bytes, std::uint32_t seed = 0);

template <typename T>
std::uint32_t crc32_of(std::span<const T> values, std::uint32_t seed = 0) {
  return crc32(std::as_bytes(values), seed);
}

}  // namespace downscale
