#include <doctest.h>

#include <random>

#include "downscale/crc32.hpp"
#include "downscale/error.hpp"
#include "downscale/ops.hpp"
#include "downscale/tiles.hpp"
#include "support.hpp"

using namespace downscale;
using TD = Tensor<double>;
using testing::random_tensor;

namespace {

ReslimConfig tiny() {
  ReslimConfig c;
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 1;
  c.conv_hidden = 4;
  c.scale_factor = 2;
  return c;
}

template <typename T>
void perturb_heads(ReslimModel<T>& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 0.1);
  for (auto& h : m.heads)
    for (auto& v : h.weight.mutable_values()) v = static_cast<T>(n(rng));
  for (auto& v : m.res_conv2.mutable_values()) v = static_cast<T>(n(rng));
}

bool partitions(const std::vector<Rect>& rects, std::size_t h, std::size_t w) {
  std::vector<int> hits(h * w, 0);
  for (const auto& r : rects) {
    if (r.row + r.height > h || r.col + r.width > w) return false;
    for (std::size_t i = r.row; i < r.row + r.height; ++i)
      for (std::size_t j = r.col; j < r.col + r.width; ++j) ++hits[i * w + j];
  }
  return std::all_of(hits.begin(), hits.end(), [](int v) { return v == 1; });
}

}  // namespace

TEST_CASE("plan_tiles") {
  SUBCASE("single tile") {
    const TileLayout l = plan_tiles(16, 24, 1, 1, 0, 2, 4);
    REQUIRE(l.count() == 1);
    CHECK(l.cores[0] == Rect{0, 0, 16, 24});
    CHECK(l.padded[0] == l.cores[0]);
  }
  SUBCASE("2x2 tiles with halo 4 on 32x32") {
    const TileLayout l = plan_tiles(32, 32, 2, 2, 4, 2, 1);
    // geometric oracle: core grown by 4 and clamped to [0, 32)
    for (std::size_t t = 0; t < 4; ++t) {
      const Rect c = l.cores[t];
      const std::size_t r0 = c.row == 0 ? 0 : c.row - 4, c0 = c.col == 0 ? 0 : c.col - 4;
      const std::size_t r1 = std::min<std::size_t>(32, c.row + c.height + 4), c1 = std::min<std::size_t>(32, c.col + c.width + 4);
      CHECK(l.padded[t] == Rect{r0, c0, r1 - r0, c1 - c0});
      CHECK(l.padded[t].height == 20);
      CHECK(l.tile_height(t) == 24);
    }
  }
  SUBCASE("4x4 tiles on 720x1440 share tokens evenly") {
    const TileLayout l = plan_tiles(720, 1440, 4, 4, 0, 2, 4);
    for (std::size_t t = 0; t < 16; ++t) CHECK(l.cores[t].area() / 4 * 16 == 720u * 1440u / 4);
  }
  SUBCASE("invariants on uneven splits") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t p = 1 + rng() % 3, s = std::size_t{1} << (rng() % 4);
      const std::size_t h = p * (8 + rng() % 20), w = p * (8 + rng() % 20);
      const std::size_t tr = 1 + rng() % 3, tc = 1 + rng() % 3;
      const TileLayout l = plan_tiles(h, w, tr, tc, p * (rng() % 2), p, s);
      CHECK(partitions(l.cores, h, w));
      CHECK(l.cores.front().height >= l.cores.back().height);
      CHECK(l.cores.front().width >= l.cores.back().width);
      std::vector<Rect> out;
      for (std::size_t t = 0; t < l.count(); ++t) out.push_back(l.output_core(t));
      CHECK(partitions(out, s * h, s * w));
      for (std::size_t t = 0; t < l.count(); ++t) {
        CHECK(l.cores[t].height % p == 0);
        CHECK(l.cores[t].width % p == 0);
        CHECK(l.padded[t].row + l.padded[t].height <= h);
        CHECK(l.padded[t].col + l.padded[t].width <= w);
      }
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS(plan_tiles(4, 4, 4, 1, 0, 2, 1));
    CHECK_THROWS_AS(plan_tiles(16, 16, 2, 2, 8, 2, 1), ConfigError);
    CHECK_THROWS_AS(plan_tiles(16, 16, 2, 2, 3, 2, 1), ConfigError);
  }
}

TEST_CASE("extract_tile and stitch") {
  std::mt19937_64 rng(2);
  const TD x = random_tensor({2, 12, 16}, rng, -1, 1, false);
  SUBCASE("single tile is the identity") {
    const TileLayout l = plan_tiles(12, 16, 1, 1, 0, 2, 1);
    const TD t = extract_tile(x, l, 0);
    CHECK(std::equal(t.values().begin(), t.values().end(), x.values().begin()));
    const TD back = stitch(std::vector<TD>{t}, l);
    CHECK(std::equal(back.values().begin(), back.values().end(), x.values().begin()));
  }
  SUBCASE("boundary pixels are duplicated into neighbours") {
    const TileLayout l = plan_tiles(12, 16, 1, 2, 2, 2, 1);
    const TD a = extract_tile(x, l, 0), b = extract_tile(x, l, 1);
    // column 8 is tile 1's first core column and sits in tile 0's halo
    for (std::size_t r = 0; r < 12; ++r) {
      const double v = x.at(r * 16 + 8);
      CHECK(a.at((r + 2) * a.dim(2) + 2 + 8) == v);
      CHECK(b.at((r + 2) * b.dim(2) + 2) == v);
    }
    CHECK(a.shape() == b.shape());
  }
  SUBCASE("stitched cores reproduce the checksum") {
    const TileLayout l = plan_tiles(12, 16, 3, 2, 2, 2, 1);
    std::vector<TD> tiles;
    for (std::size_t t = 0; t < l.count(); ++t) tiles.push_back(extract_tile(x, l, t));
    const TD back = stitch(tiles, l);
    CHECK(crc32_of<double>(back.values()) == crc32_of<double>(x.values()));
  }
  SUBCASE("placement against a direct oracle") {
    const TileLayout l = plan_tiles(12, 16, 2, 2, 2, 2, 3);
    std::vector<TD> tiles;
    for (std::size_t t = 0; t < 4; ++t) tiles.push_back(random_tensor({2, 3 * l.tile_height(t), 3 * l.tile_width(t)}, rng));
    const TD y = stitch(tiles, l);
    CHECK(y.shape() == Shape{2, 36, 48});
    for (std::size_t t = 0; t < 4; ++t) {
      const Rect oc = l.output_core(t);
      const std::size_t th = tiles[t].dim(1), tw = tiles[t].dim(2);
      for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t r = 0; r < oc.height; ++r)
          for (std::size_t c = 0; c < oc.width; ++c) {
            const double expect = tiles[t].at((k * th + r + 6) * tw + c + 6);
            CHECK(y.at((k * 36 + oc.row + r) * 48 + oc.col + c) == expect);
          }
    }
  }
  SUBCASE("errors") {
    const TileLayout l = plan_tiles(12, 16, 2, 2, 2, 2, 1);
    CHECK_THROWS_AS(extract_tile(x, l, 4), ShapeError);
    CHECK_THROWS_AS(stitch(std::vector<TD>{x}, l), ShapeError);
  }
}

TEST_CASE("tiled_forward") {
  ReslimModel<double> model(tiny(), 3);
  perturb_heads(model, 4);
  std::mt19937_64 rng(5);
  const TD x = random_tensor({1, 16, 16}, rng, -1, 1, false);
  NoGradGuard g;
  SUBCASE("one tile equals the plain forward") {
    const auto out = tiled_forward(x, model, plan_tiles(16, 16, 1, 1, 0, 2, 2), 1);
    const TD ref = reslim_forward(x, model).pred;
    CHECK(std::equal(out.output.values().begin(), out.output.values().end(), ref.values().begin()));
    CHECK(out.reports.size() == 1);
  }
  SUBCASE("locality") {
    const TileLayout l = plan_tiles(16, 16, 2, 2, 2, 2, 2);
    const TD base = tiled_forward(x, model, l, 2).output;
    TD moved = x.detach();
    moved.mutable_values()[15 * 16 + 15] += 5.0;  // far corner, outside tile 0's padded rectangle
    const TD out = tiled_forward(moved, model, l, 2).output;
    const Rect oc = l.output_core(0);
    for (std::size_t r = 0; r < oc.height; ++r)
      for (std::size_t c = 0; c < oc.width; ++c) CHECK(out.at(r * 32 + c) == base.at(r * 32 + c));
    const Rect far = l.output_core(3);
    CHECK(out.at((far.row + far.height - 1) * 32 + far.col + far.width - 1) !=
          base.at((far.row + far.height - 1) * 32 + far.col + far.width - 1));
  }
  SUBCASE("worker count does not change results") {
    const TileLayout l = plan_tiles(16, 16, 2, 2, 2, 2, 2);
    const TD a = tiled_forward(x, model, l, 1).output, b = tiled_forward(x, model, l, 3).output;
    CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  }
}

TEST_CASE("tiled training") {
  const ReslimConfig c = tiny();
  std::mt19937_64 rng(6);
  const Sample<double> s{random_tensor({1, 8, 8}, rng, -1, 1, false), random_tensor({1, 16, 16}, rng, -1, 1, false),
                         uniform_lat_weights(16)};
  SUBCASE("one worker, one tile matches train_step") {
    ReslimModel<double> plain(c, 1);
    perturb_heads(plain, 2);
    std::vector<ReslimModel<double>> replicas{plain.clone()};
    std::vector<AdamState<double>> opts(1);
    AdamState<double> opt;
    const std::vector<Sample<double>> batch{s};
    const TileLayout l = plan_tiles(8, 8, 1, 1, 0, 2, 2);
    for (int i = 0; i < 2; ++i) {
      const double a = train_step(std::span<const Sample<double>>(batch), plain, opt).loss;
      const double b = tiled_train_step(std::span<const Sample<double>>(batch), replicas, opts, l).loss;
      CHECK(a == doctest::Approx(b).epsilon(1e-14));
    }
    CHECK(parameter_hash(plain) == parameter_hash(replicas[0]));
  }
  SUBCASE("duplicate data on two workers averages to the single-worker gradient") {
    ReslimModel<double> m(c, 1);
    perturb_heads(m, 2);
    std::vector<ReslimModel<double>> one{m.clone()}, two{m.clone(), m.clone()};
    const TileLayout l = plan_tiles(8, 8, 1, 1, 0, 2, 2);
    const std::vector<Sample<double>> single{s}, twice{s, s};
    tiled_gradients(std::span<const Sample<double>>(single), one, l);
    tiled_gradients(std::span<const Sample<double>>(twice), two, l);
    auto pa = one[0].trainable(), pb = two[1].trainable();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      for (std::size_t j = 0; j < pa[i]->grad().size(); ++j) CHECK(pa[i]->grad()[j] == pb[i]->grad()[j]);
    }
  }
  SUBCASE("replicas stay identical and runs are reproducible") {
    ReslimModel<double> m(c, 1);
    perturb_heads(m, 3);
    const TileLayout l = plan_tiles(8, 8, 2, 2, 2, 2, 2);
    const std::vector<Sample<double>> batch{s, s};
    std::uint32_t hashes[2];
    for (int run = 0; run < 2; ++run) {
      std::vector<ReslimModel<double>> reps;
      for (int w = 0; w < 3; ++w) reps.push_back(m.clone());
      std::vector<AdamState<double>> opts(3);
      for (int step = 0; step < 3; ++step) {
        const TiledStep st = tiled_train_step(std::span<const Sample<double>>(batch), reps, opts, l);
        CHECK(st.reports.size() == 8);
        for (auto& r : reps) CHECK(parameter_hash(r) == parameter_hash(reps[0]));
      }
      hashes[run] = parameter_hash(reps[0]);
    }
    CHECK(hashes[0] == hashes[1]);
  }
}

TEST_CASE("seam_rmse") {
  const TileLayout l = plan_tiles(8, 8, 2, 1, 0, 2, 1);
  TD a = TD::zeros({1, 8, 8});
  TD b = TD::zeros({1, 8, 8});
  b.mutable_values()[4 * 8 + 3] = 2.0;  // on the seam row
  b.mutable_values()[0] = 100.0;        // far from it
  CHECK(seam_rmse(a, b, l, 1) == doctest::Approx(std::sqrt(4.0 / 16.0)));
  CHECK(seam_rmse(a, b, plan_tiles(8, 8, 1, 1, 0, 2, 1), 1) == 0.0);
}
