#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "downscale/crc32.hpp"
#include "downscale/detail/binary_io.hpp"
#include "downscale/error.hpp"
#include "downscale/grid.hpp"
#include "support.hpp"

using namespace downscale;
namespace fs = std::filesystem;

namespace {

Grid single(std::size_t h, std::size_t w, float value = 0.0f) {
  Grid g;
  g.channel_names = {"t2m"};
  g.channels.push_back(ImageF::Constant(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w), value));
  return g;
}

bool same_grid(const Grid& a, const Grid& b) {
  if (a.channel_names != b.channel_names || a.lat_min != b.lat_min || a.lat_max != b.lat_max ||
      a.lon_min != b.lon_min || a.lon_max != b.lon_max || a.channel_count() != b.channel_count()) {
    return false;
  }
  for (std::size_t c = 0; c < a.channel_count(); ++c) {
    if (a.channels[c].rows() != b.channels[c].rows() || a.channels[c].cols() != b.channels[c].cols()) return false;
    if (std::memcmp(a.channels[c].data(), b.channels[c].data(), sizeof(float) * a.channels[c].size()) != 0) return false;
  }
  return true;
}

std::vector<std::byte> slurp(const fs::path& p) { return detail::read_file(p.string()); }

}  // namespace

TEST_CASE("crc32 matches the standard check value") {
  const std::string s = "123456789";
  CHECK(crc32(std::as_bytes(std::span(s.data(), s.size()))) == 0xCBF43926u);
}

TEST_CASE("smallest grid has the documented byte layout") {
  const auto dir = testing::scratch_dir("grid");
  const auto path = (dir / "one.orbg").string();
  Grid g = single(1, 1, 0.0f);
  write_grid(g, path);
  // header fields, one name, checksum, then one float32
  CHECK(fs::file_size(path) == 4 + 4 + 3 * 4 + 4 * 8 + 32 + 4 + 4);
  const auto bytes = slurp(path);
  CHECK(std::string(reinterpret_cast<const char*>(bytes.data()), 4) == "ORB2");
  CHECK(same_grid(read_grid(path), g));
  fs::remove_all(dir);
}

TEST_CASE("payload of a 720x1440x3 grid") {
  const auto dir = testing::scratch_dir("grid");
  Grid g;
  for (int c = 0; c < 3; ++c) {
    g.channel_names.push_back("v" + std::to_string(c));
    g.channels.push_back(ImageF::Constant(720, 1440, static_cast<float>(c)));
  }
  const auto path = (dir / "big.orbg").string();
  write_grid(g, path);
  const std::size_t header = 4 + 4 + 12 + 32 + 3 * 32 + 4;
  CHECK(fs::file_size(path) - header == 3u * 720u * 1440u * 4u);
  fs::remove_all(dir);
}

TEST_CASE("round trip is bit exact on random grids") {
  const auto dir = testing::scratch_dir("grid");
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0.0f, 10.0f);
  for (int trial = 0; trial < 5; ++trial) {
    Grid g;
    g.lat_min = -10.5;
    g.lat_max = 42.25;
    g.lon_min = 3;
    g.lon_max = 77;
    const int c = 1 + trial % 3;
    for (int k = 0; k < c; ++k) {
      g.channel_names.push_back("channel_" + std::to_string(k));
      ImageF img(5 + trial, 7);
      for (auto& v : img.reshaped()) v = n(rng);
      g.channels.push_back(img);
    }
    const auto path = (dir / ("g" + std::to_string(trial) + ".orbg")).string();
    write_grid(g, path);
    CHECK(same_grid(read_grid(path), g));
    // read then write reproduces the file byte for byte
    const auto again = (dir / "again.orbg").string();
    write_grid(read_grid(path), again);
    CHECK(slurp(path) == slurp(again));
  }
  fs::remove_all(dir);
}

TEST_CASE("write_grid rejects non-finite values") {
  const auto dir = testing::scratch_dir("grid");
  Grid g = single(2, 2);
  g.channels[0](1, 1) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(write_grid(g, (dir / "nan.orbg").string()), NumericalError);
  fs::remove_all(dir);
}

TEST_CASE("read_grid errors") {
  const auto dir = testing::scratch_dir("grid");
  const auto path = (dir / "g.orbg").string();
  Grid g = single(4, 4, 1.5f);
  write_grid(g, path);
  auto bytes = slurp(path);

  auto write_bytes = [&](const std::vector<std::byte>& b, const std::string& name) {
    const auto p = (dir / name).string();
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    return p;
  };

  SUBCASE("bad magic") {
    auto b = bytes;
    for (int i = 0; i < 4; ++i) b[i] = std::byte{'X'};
    CHECK_THROWS_WITH_AS(read_grid(write_bytes(b, "magic.orbg")), doctest::Contains("bad magic"), FormatError);
  }
  SUBCASE("truncated payload names both byte counts") {
    auto b = bytes;
    b.resize(b.size() - 10);
    try {
      read_grid(write_bytes(b, "trunc.orbg"));
      FAIL("no error");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("expected 64") != std::string::npos);
      CHECK(msg.find("found 54") != std::string::npos);
    }
  }
  SUBCASE("zero dimension") {
    auto b = bytes;
    for (int i = 8; i < 12; ++i) b[i] = std::byte{0};
    CHECK_THROWS_AS(read_grid(write_bytes(b, "zero.orbg")), FormatError);
  }
  SUBCASE("corrupted payload") {
    auto b = bytes;
    b.back() ^= std::byte{0x40};
    CHECK_THROWS_WITH_AS(read_grid(write_bytes(b, "crc.orbg")), doctest::Contains("checksum"), FormatError);
  }
  fs::remove_all(dir);
}

TEST_CASE("coarsen") {
  SUBCASE("2x2 block mean") {
    Grid g = single(2, 2);
    g.channels[0] << 1, 3, 5, 7;
    const Grid c = coarsen(g, 2);
    CHECK(c.height() == 1);
    CHECK(c.channels[0](0, 0) == 4.0f);
  }
  SUBCASE("constant stays constant") {
    const Grid c = coarsen(single(16, 8, 2.5f), 4);
    CHECK((c.channels[0] == 2.5f).all());
  }
  SUBCASE("ramp against direct block sums") {
    Grid g = single(8, 8);
    for (int r = 0; r < 8; ++r)
      for (int col = 0; col < 8; ++col) g.channels[0](r, col) = static_cast<float>(r * 8 + col);
    const Grid c = coarsen(g, 4);
    for (int br = 0; br < 2; ++br) {
      for (int bc = 0; bc < 2; ++bc) {
        double s = 0;
        for (int r = 0; r < 4; ++r)
          for (int col = 0; col < 4; ++col) s += (br * 4 + r) * 8 + (bc * 4 + col);
        CHECK(c.channels[0](br, bc) == doctest::Approx(s / 16).epsilon(1e-12));
      }
    }
  }
  SUBCASE("non-divisible factor") { CHECK_THROWS_AS(coarsen(single(6, 6), 4), ShapeError); }
  SUBCASE("global mean and composition") {
    const Grid f = synth_grf(64, 64, 2, -2.5, 11);
    const Grid c = coarsen(f, 4);
    for (std::size_t k = 0; k < 2; ++k) {
      const double a = f.channels[k].cast<double>().mean(), b = c.channels[k].cast<double>().mean();
      CHECK(std::abs(a - b) <= 1e-6 * std::max(1.0, std::abs(a)));
    }
    const Grid twice = coarsen(coarsen(f, 2), 4);
    const Grid once = coarsen(f, 8);
    CHECK(((twice.channels[0] - once.channels[0]).abs() <= 1e-6f).all());
    CHECK(c.lat_min == f.lat_min);
    CHECK(c.lon_max == f.lon_max);
  }
}

TEST_CASE("synth_grf") {
  const Grid a = synth_grf(32, 64, 1, -3.0, 5);
  const Grid b = synth_grf(32, 64, 1, -3.0, 5);
  CHECK(same_grid(a, b));
  CHECK_FALSE(same_grid(a, synth_grf(32, 64, 1, -3.0, 6)));
  CHECK_THROWS_AS(synth_grf(48, 64, 1, -3.0, 5), ShapeError);
  CHECK_THROWS_AS(synth_grf(4, 4, 1, -3.0, 5), ShapeError);

  const Grid many = synth_grf(16, 16, 23, -3.0, 1);
  CHECK(many.channel_count() == 23);
  std::set<float> firsts;
  for (const auto& ch : many.channels) firsts.insert(ch(3, 4));
  CHECK(firsts.size() == 23);
}

TEST_CASE("make_pairs writes consistent, reproducible pairs") {
  const auto dir = testing::scratch_dir("pairs");
  GeneratorSpec spec;
  spec.height = spec.width = 128;
  spec.seed = 7;
  const PairManifest m = make_pairs((dir / "a").string(), 4, 4, spec);
  CHECK(m.pairs.size() == 4);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) files += e.path().extension() == ".orbg";
  CHECK(files == 8);
  for (const auto& [in, out] : m.pairs) {
    const Grid gi = read_grid((dir / "a" / in).string());
    const Grid go = read_grid((dir / "a" / out).string());
    CHECK(gi.height() == 32);
    CHECK(gi.width() == 32);
    CHECK(go.height() == 4 * gi.height());
    CHECK(go.width() == 4 * gi.width());
  }
  const PairManifest back = read_manifest((dir / "a" / "manifest.json").string());
  CHECK(back.pairs == m.pairs);
  CHECK(back.scale_factor == 4);
  CHECK(back.seed == 7);

  make_pairs((dir / "b").string(), 4, 4, spec);
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    CHECK(slurp(e.path()) == slurp(dir / "b" / e.path().filename()));
  }
  CHECK_THROWS_AS(make_pairs((dir / "c").string(), 1, 3, spec), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("tensor conversion keeps channel-major order") {
  Grid g;
  g.channel_names = {"a", "b"};
  g.channels = {ImageF::Constant(2, 3, 1.0f), ImageF::Constant(2, 3, 2.0f)};
  g.channels[1](1, 2) = 9.0f;
  const auto t = to_tensor<double>(g);
  CHECK(t.shape() == Shape{2, 2, 3});
  CHECK(t.at(6 + 5) == 9.0);
  const Grid back = to_grid(t, g, g.channel_names);
  CHECK(same_grid(back, g));
  CHECK(to_grid(t, g).channel_names == std::vector<std::string>{"var0", "var1"});
  const auto lats = row_latitudes(g);
  CHECK(lats.size() == 2);
  CHECK(lats[0] == doctest::Approx(45.0));
  CHECK(lats[1] == doctest::Approx(-45.0));
}
