#include "downscale/grid.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "downscale/crc32.hpp"
#include "downscale/detail/binary_io.hpp"
#include "downscale/detail/fft.hpp"
#include "downscale/error.hpp"

namespace downscale {

namespace {
constexpr char kMagic[4] = {'O', 'R', 'B', '2'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kNameBytes = 32;

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }
}  // namespace

void Grid::validate() const {
  if (channels.empty()) throw ShapeError("grid has no channels");
  const auto h = channels[0].rows(), w = channels[0].cols();
  if (h < 1 || w < 1) throw ShapeError("grid has zero height or width");
  for (const auto& c : channels) {
    if (c.rows() != h || c.cols() != w) throw ShapeError("grid channels differ in shape");
    if (!c.isFinite().all()) throw NumericalError("grid contains non-finite values");
  }
  if (channel_names.size() != channels.size()) {
    throw ShapeError("grid has " + std::to_string(channels.size()) + " channels but " +
                     std::to_string(channel_names.size()) + " names");
  }
  for (const auto& name : channel_names) {
    if (name.empty()) throw ConfigError("grid channel name is empty");
    if (name.size() > kNameBytes) throw ConfigError("grid channel name longer than 32 bytes: " + name);
  }
  if (!(lat_min >= -90.0 && lat_min < lat_max && lat_max <= 90.0)) {
    throw ConfigError("grid latitude span must satisfy -90 <= lat_min < lat_max <= 90");
  }
}

void write_grid(const Grid& grid, const std::string& path) {
  grid.validate();
  const std::size_t h = grid.height(), w = grid.width(), c = grid.channel_count();
  std::vector<float> payload;
  payload.reserve(c * h * w);
  for (const auto& ch : grid.channels) payload.insert(payload.end(), ch.data(), ch.data() + ch.size());

  detail::ByteWriter out;
  out.put_bytes(std::as_bytes(std::span(kMagic)));
  out.put<std::uint32_t>(kVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(h));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(w));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(c));
  out.put<double>(grid.lat_min);
  out.put<double>(grid.lat_max);
  out.put<double>(grid.lon_min);
  out.put<double>(grid.lon_max);
  for (const auto& name : grid.channel_names) out.put_padded(name, kNameBytes);
  out.put<std::uint32_t>(crc32_of(std::span<const float>(payload)));
  out.put_bytes(std::as_bytes(std::span(payload)));
  detail::write_file(path, out.bytes());
}

Grid read_grid(const std::string& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader in(bytes, path);
  const auto magic = in.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw FormatError(path + ": bad magic, not an ORBG grid file");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kVersion) throw FormatError(path + ": unsupported grid version " + std::to_string(version));
  const std::size_t h = in.get<std::uint32_t>();
  const std::size_t w = in.get<std::uint32_t>();
  const std::size_t c = in.get<std::uint32_t>();
  if (h == 0 || w == 0 || c == 0) throw FormatError(path + ": zero-valued dimension field");
  Grid grid;
  grid.lat_min = in.get<double>();
  grid.lat_max = in.get<double>();
  grid.lon_min = in.get<double>();
  grid.lon_max = in.get<double>();
  for (std::size_t i = 0; i < c; ++i) {
    const auto raw = in.take(kNameBytes);
    const char* p = reinterpret_cast<const char*>(raw.data());
    grid.channel_names.emplace_back(p, strnlen(p, kNameBytes));
  }
  const auto checksum = in.get<std::uint32_t>();
  const std::size_t expected = c * h * w * sizeof(float);
  if (in.remaining() < expected) {
    throw FormatError(path + ": truncated payload, expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(in.remaining()));
  }
  const auto payload = in.take(expected);
  if (crc32(payload) != checksum) throw FormatError(path + ": payload checksum mismatch");
  for (std::size_t i = 0; i < c; ++i) {
    ImageF img(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
    std::memcpy(img.data(), payload.data() + i * h * w * sizeof(float), h * w * sizeof(float));
    grid.channels.push_back(std::move(img));
  }
  grid.validate();
  return grid;
}

Grid coarsen(const Grid& fine, std::size_t factor) {
  const std::size_t h = fine.height(), w = fine.width();
  if (factor == 0 || h % factor != 0 || w % factor != 0) {
    throw ShapeError("coarsen: factor " + std::to_string(factor) + " does not divide " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  Grid out = fine;
  const auto ch = static_cast<Eigen::Index>(h / factor), cw = static_cast<Eigen::Index>(w / factor);
  const auto f = static_cast<Eigen::Index>(factor);
  for (std::size_t c = 0; c < fine.channel_count(); ++c) {
    const ImageD src = fine.channels[c].cast<double>();
    ImageF dst(ch, cw);
    for (Eigen::Index r = 0; r < ch; ++r) {
      for (Eigen::Index q = 0; q < cw; ++q) {
        dst(r, q) = static_cast<float>(src.block(r * f, q * f, f, f).mean());
      }
    }
    out.channels[c] = std::move(dst);
  }
  return out;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined state
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

Grid synth_grf(std::size_t height, std::size_t width, std::size_t channels,
               double spectral_slope, std::uint64_t seed) {
  if (!is_power_of_two(height) || !is_power_of_two(width) || height < 8 || width < 8) {
    throw ShapeError("synth_grf: height and width must be powers of two >= 8");
  }
  if (!(spectral_slope < 0)) throw ConfigError("synth_grf: spectral slope must be negative");
  if (channels == 0) throw ConfigError("synth_grf: need at least one channel");
  const auto h = static_cast<Eigen::Index>(height), w = static_cast<Eigen::Index>(width);

  // Amplitude filter sqrt(P(k)) = k^(slope/2); zero at k = 0 removes the mean.
  ImageD amplitude(h, w);
  for (Eigen::Index r = 0; r < h; ++r) {
    const double ky = static_cast<double>(detail::signed_frequency(r, h));
    for (Eigen::Index c = 0; c < w; ++c) {
      const double kx = static_cast<double>(detail::signed_frequency(c, w));
      const double k = std::hypot(kx, ky);
      amplitude(r, c) = k == 0.0 ? 0.0 : std::pow(k, 0.5 * spectral_slope);
    }
  }

  Grid grid;
  grid.lat_min = 24.0;
  grid.lat_max = 50.0;
  grid.lon_min = -125.0;
  grid.lon_max = -66.0;
  for (std::size_t ch = 0; ch < channels; ++ch) {
    std::mt19937_64 rng(mix_seed(seed, ch));
    std::normal_distribution<double> normal(0.0, 1.0);
    detail::ComplexImage noise(h, w);
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = normal(rng);
    detail::ComplexImage spectrum = detail::fft2(noise);
    spectrum *= amplitude.cast<std::complex<double>>();
    ImageD field = detail::ifft2(spectrum).real();
    field -= field.mean();
    const double sd = std::sqrt(field.square().mean());
    if (sd > 0) field /= sd;
    grid.channels.push_back(field.cast<float>());
    grid.channel_names.push_back("var" + std::to_string(ch));
  }
  return grid;
}

void write_manifest(const PairManifest& manifest, const std::string& path) {
  nlohmann::json j;
  j["pairs"] = nlohmann::json::array();
  for (const auto& [input, target] : manifest.pairs) j["pairs"].push_back({input, target});
  j["scale_factor"] = manifest.scale_factor;
  j["seed"] = manifest.seed;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path);
  out << j.dump(2) << '\n';
}

PairManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  PairManifest m;
  try {
    for (const auto& p : j.at("pairs")) m.pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    m.scale_factor = j.at("scale_factor").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return m;
}

PairManifest make_pairs(const std::string& out_dir, std::size_t count,
                        std::size_t scale_factor, const GeneratorSpec& spec) {
  if (scale_factor != 2 && scale_factor != 4 && scale_factor != 8) {
    throw ConfigError("make_pairs: scale factor must be 2, 4 or 8");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  PairManifest manifest;
  manifest.scale_factor = scale_factor;
  manifest.seed = spec.seed;
  for (std::size_t i = 0; i < count; ++i) {
    const Grid fine = synth_grf(spec.height, spec.width, spec.channels,
                                spec.spectral_slope, mix_seed(spec.seed, 1000 + i));
    const Grid coarse = coarsen(fine, scale_factor);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "pair_%04zu", i);
    const std::string input = std::string(stem) + "_input.orbg";
    const std::string target = std::string(stem) + "_target.orbg";
    write_grid(coarse, (std::filesystem::path(out_dir) / input).string());
    write_grid(fine, (std::filesystem::path(out_dir) / target).string());
    manifest.pairs.emplace_back(input, target);
  }
  write_manifest(manifest, (std::filesystem::path(out_dir) / "manifest.json").string());
  return manifest;
}

template <typename T>
Tensor<T> to_tensor(const Grid& grid) {
  const std::size_t h = grid.height(), w = grid.width();
  std::vector<T> values;
  values.reserve(grid.channel_count() * h * w);
  for (const auto& ch : grid.channels) {
    for (Eigen::Index i = 0; i < ch.size(); ++i) values.push_back(static_cast<T>(ch.data()[i]));
  }
  return Tensor<T>::from_values({grid.channel_count(), h, w}, std::move(values));
}

template <typename T>
Grid to_grid(const Tensor<T>& tensor, const Grid& like, std::vector<std::string> channel_names) {
  if (tensor.rank() != 3) throw ShapeError("to_grid: expected [C,H,W], got " + to_string(tensor.shape()));
  const std::size_t c = tensor.dim(0), h = tensor.dim(1), w = tensor.dim(2);
  Grid grid;
  grid.lat_min = like.lat_min;
  grid.lat_max = like.lat_max;
  grid.lon_min = like.lon_min;
  grid.lon_max = like.lon_max;
  for (std::size_t k = 0; k < c; ++k) {
    ImageF img(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
    for (std::size_t i = 0; i < h * w; ++i) img.data()[i] = static_cast<float>(tensor.values()[k * h * w + i]);
    grid.channels.push_back(std::move(img));
    grid.channel_names.push_back(k < channel_names.size() ? channel_names[k] : "var" + std::to_string(k));
  }
  return grid;
}

std::vector<double> row_latitudes(const Grid& grid) {
  const std::size_t h = grid.height();
  std::vector<double> lat(h);
  const double step = (grid.lat_max - grid.lat_min) / static_cast<double>(h);
  for (std::size_t r = 0; r < h; ++r) lat[r] = grid.lat_max - (static_cast<double>(r) + 0.5) * step;
  return lat;
}

template Tensor<float> to_tensor<float>(const Grid&);
template Tensor<double> to_tensor<double>(const Grid&);
template Grid to_grid<float>(const Tensor<float>&, const Grid&, std::vector<std::string>);
template Grid to_grid<double>(const Tensor<double>&, const Grid&, std::vector<std::string>);

}  // namespace downscale
