#include "downscale/checkpoint.hpp"

#include <fstream>
#include <limits>

#include "downscale/crc32.hpp"
#include "downscale/detail/binary_io.hpp"
#include "downscale/error.hpp"

namespace downscale {

namespace detail {

std::vector<std::byte> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path);
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::byte> bytes(size);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("failed reading " + path);
  return bytes;
}

void write_file(const std::string& path, std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace detail

namespace {
constexpr char kMagic[4] = {'O', 'R', 'B', 'W'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void write_checkpoint(const std::string& path, const std::vector<StoredTensor>& tensors) {
  detail::ByteWriter w;
  w.put_bytes(std::as_bytes(std::span(kMagic)));
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ConfigError("checkpoint: parameter name too long: " + t.name);
    }
    if (numel(t.shape) != t.values.size()) {
      throw ShapeError("checkpoint: " + t.name + " payload does not match shape");
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_padded(t.name, t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t extent : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(extent));
    w.put_bytes(std::as_bytes(std::span(t.values)));
  }
  w.put<std::uint32_t>(crc32(w.bytes()));
  detail::write_file(path, w.bytes());
}

std::vector<StoredTensor> read_checkpoint(const std::string& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes, path);
  const auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw FormatError(path + ": bad magic, not an ORBW checkpoint");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<StoredTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto name_len = r.get<std::uint16_t>();
    const auto name = r.take(name_len);
    t.name.assign(reinterpret_cast<const char*>(name.data()), name.size());
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t a = 0; a < rank; ++a) t.shape.push_back(r.get<std::uint32_t>());
    t.values.resize(numel(t.shape));
    const auto payload = r.take(t.values.size() * sizeof(float));
    std::memcpy(t.values.data(), payload.data(), payload.size());
    tensors.push_back(std::move(t));
  }
  const std::size_t body = r.position();
  const auto stored = r.get<std::uint32_t>();
  if (crc32(std::span(bytes).first(body)) != stored) {
    throw FormatError(path + ": checkpoint checksum mismatch");
  }
  return tensors;
}

}  // namespace downscale
