#include <doctest.h>

#include <random>

#include "downscale/compress.hpp"
#include "downscale/error.hpp"
#include "downscale/ops.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace downscale;
using TD = Tensor<double>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

EdgeMap edge_map(const Mask& m) {
  EdgeMap e;
  e.edges = m;
  return e;
}

oracle::BoolMap to_rows(const Mask& m) {
  oracle::BoolMap out(static_cast<std::size_t>(m.rows()), std::vector<bool>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

// Every pixel covered exactly once.
bool covers_exactly(const PatchSet& ps) {
  Eigen::ArrayXXi hits = Eigen::ArrayXXi::Zero(static_cast<Eigen::Index>(ps.height), static_cast<Eigen::Index>(ps.width));
  for (const auto& p : ps.patches) {
    if (p.row + p.side > ps.height || p.col + p.side > ps.width) return false;
    hits.block(p.row, p.col, p.side, p.side) += 1;
  }
  return (hits == 1).all();
}

}  // namespace

TEST_CASE("canny") {
  SUBCASE("constant image has no edges") {
    CHECK(canny(ImageD::Constant(12, 12, 3.0)).count() == 0);
  }
  SUBCASE("vertical step gives one line at the step") {
    ImageD img = ImageD::Zero(20, 20);
    img.rightCols(10) = 1.0;
    const EdgeMap e = canny(img);
    CHECK(e.count() > 0);
    for (Eigen::Index r = 0; r < 20; ++r) {
      std::size_t in_row = 0;
      for (Eigen::Index c = 0; c < 20; ++c) {
        if (!e.edges(r, c)) continue;
        ++in_row;
        CHECK(std::abs(static_cast<double>(c) - 9.5) <= 1.0);
      }
      CHECK(in_row >= 1);
      CHECK(in_row <= 2);
    }
    const EdgeMap again = canny(img);
    CHECK((again.edges == e.edges).all());
  }
  SUBCASE("degenerate input") { CHECK_THROWS_AS(canny(ImageD::Zero(2, 5)), ShapeError); }
}

TEST_CASE("quadtree_partition examples") {
  SUBCASE("no edges gives the coarse grid") {
    const PatchSet ps = quadtree_partition(edge_map(Mask::Constant(16, 8, false)), 1, 4, 0.05);
    CHECK(ps.size() == 8);
    for (const auto& p : ps.patches) CHECK(p.side == 4);
    CHECK(compression_ratio(ps, 1) == 16.0);
  }
  SUBCASE("all edges refine fully") {
    const PatchSet ps = quadtree_partition(edge_map(Mask::Constant(16, 8, true)), 1, 4, 0.05);
    CHECK(ps.size() == 128);
    CHECK(compression_ratio(ps, 1) == 1.0);
  }
  SUBCASE("corner pixel splits along one chain") {
    Mask m = Mask::Constant(16, 16, false);
    m(0, 0) = true;
    std::vector<std::size_t> counts;
    for (std::size_t min_side : {16, 8, 4, 2}) {
      counts.push_back(quadtree_partition(edge_map(m), min_side, 16, 0.0).size());
    }
    CHECK(counts == std::vector<std::size_t>{1, 4, 7, 10});
  }
  SUBCASE("one detailed quadrant") {
    Mask m = Mask::Constant(16, 16, false);
    m.topRightCorner(8, 8) = true;
    const PatchSet ps = quadtree_partition(edge_map(m), 1, 8, 0.05);
    // counting: 64 unit patches in the busy quadrant, one 8x8 for each other
    CHECK(ps.size() == 67);
    CHECK(compression_ratio(ps, 1) == doctest::Approx(256.0 / 67.0));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(quadtree_partition(edge_map(Mask::Constant(12, 12, false)), 3, 8, 0.1), ConfigError);
    CHECK_THROWS_AS(quadtree_partition(edge_map(Mask::Constant(12, 12, false)), 1, 8, 0.1), ShapeError);
  }
}

TEST_CASE("quadtree_partition matches the recursive reference") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const double density = u(rng);
    Mask m(8, 8);
    for (auto& v : m.reshaped()) v = u(rng) < density * density;
    const double thr = std::floor(u(rng) * 8) / 16;  // lands exactly on densities sometimes
    const PatchSet ps = quadtree_partition(edge_map(m), 2, 8, thr);
    const auto ref = oracle::quadtree(to_rows(m), 2, 8, thr);
    REQUIRE(ps.patches == ref);
    CHECK(covers_exactly(ps));
    for (const auto& p : ps.patches) {
      CHECK((p.side == 2 || p.side == 4 || p.side == 8));
      if (p.side > 2) {
        const double d = m.block(p.row, p.col, p.side, p.side).count() / double(p.side * p.side);
        CHECK(d <= thr);
      }
    }
    // lowering the threshold never reduces the patch count
    CHECK(quadtree_partition(edge_map(m), 2, 8, thr / 2).size() >= ps.size());
  }
}

TEST_CASE("partition_image pads and records the original extent") {
  ImageD img = ImageD::Zero(10, 13);
  img.rightCols(4) = 1.0;
  const PatchSet ps = partition_image(img, {1, 4, 0.05});
  CHECK(ps.height == 12);
  CHECK(ps.width == 16);
  CHECK(ps.orig_height == 10);
  CHECK(ps.orig_width == 13);
  CHECK(covers_exactly(ps));
  CHECK(patchset_from_json(patchset_to_json(ps)) == ps);

  const PatchSet flat = partition_image(ImageD::Constant(16, 16, 2.0), {2, 8, 0.05});
  CHECK(flat.size() == 4);
}

TEST_CASE("tokenize with a uniform layout is plain patch embedding") {
  std::mt19937_64 rng(3);
  const TD x = testing::random_tensor({1, 8, 8}, rng, -1, 1, false);
  const PatchSet ps = uniform_patches(8, 8, 2);
  REQUIRE(ps.min_side == 2);
  TokenizerWeights<double> w{testing::random_tensor({4, 5}, rng), testing::random_tensor({5}, rng),
                             testing::random_tensor({1, 5}, rng)};
  const TD tokens = tokenize(x, ps, w);
  const TD expect = add_broadcast(linear(reshape(patchify(x, 2), {16, 4}), w.weight, w.bias), reshape(w.scale_embedding, {5}));
  REQUIRE(tokens.shape() == expect.shape());
  for (std::size_t i = 0; i < tokens.size(); ++i) CHECK(tokens.at(i) == doctest::Approx(expect.at(i)).epsilon(1e-12));
}

TEST_CASE("tokenize on constant images and permuted layouts") {
  Mask m = Mask::Constant(8, 8, false);
  m.block(0, 0, 4, 4) = true;
  const PatchSet ps = quadtree_partition(edge_map(m), 1, 4, 0.05);
  std::mt19937_64 rng(5);
  TokenizerWeights<double> w{testing::random_tensor({2, 3}, rng), testing::random_tensor({3}, rng),
                             testing::random_tensor({ps.scale_levels(), 3}, rng)};
  const TD constant = TD::full({2, 8, 8}, 0.7);
  const TD tokens = tokenize(constant, ps, w);
  CHECK(tokens.dim(0) == ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (std::size_t j = 0; j < ps.size(); ++j) {
      if (ps.patches[i].side != ps.patches[j].side) continue;
      for (std::size_t d = 0; d < 3; ++d) CHECK(tokens.at(i * 3 + d) == tokens.at(j * 3 + d));
    }
  }

  const TD x = testing::random_tensor({2, 8, 8}, rng, -1, 1, false);
  const TD base = tokenize(x, ps, w);
  PatchSet shuffled = ps;
  std::vector<std::size_t> perm(ps.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled.patches[i] = ps.patches[perm[i]];
  const TD moved = tokenize(x, shuffled, w);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t d = 0; d < 3; ++d) CHECK(moved.at(i * 3 + d) == base.at(perm[i] * 3 + d));
}

TEST_CASE("detokenize") {
  SUBCASE("single patch fills the image from one token") {
    PatchSet ps = uniform_patches(4, 4, 4);
    ps.min_side = 1;
    ps.max_side = 4;
    DetokenizerWeights<double> w{TD::from_values({2, 1}, {1.0, 0.0}), TD::zeros({1}),
                                 TD::from_values({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0}), TD::zeros({1})};
    const TD img = detokenize(TD::from_values({1, 2}, {3.5, -9.0}), ps, w, 1);
    CHECK(img.shape() == Shape{1, 4, 4});
    for (double v : img.values()) CHECK(v == 3.5);
  }
  SUBCASE("identity round trip on a piecewise-constant image") {
    ImageD img(16, 16);
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) img(r, c) = (r < 8 ? 1.0 : -2.0) + (c < 8 ? 0.0 : 4.0);
    const PatchSet ps = partition_image(img, {1, 4, 0.05});
    CHECK(ps.size() < 256);
    TD x = TD::from_values({1, 16, 16}, std::vector<double>(img.data(), img.data() + 256));
    TokenizerWeights<double> tw{TD::full({1, 1}, 1.0), TD::zeros({1}), TD::zeros({ps.scale_levels(), 1})};
    const std::vector<double> stencil{0.05, 0.1, 0.05, 0.1, 0.4, 0.1, 0.05, 0.1, 0.05};
    DetokenizerWeights<double> dw{TD::full({1, 1}, 1.0), TD::zeros({1}), TD::from_values({1, 1, 3, 3}, stencil),
                                  TD::zeros({1})};
    const TD back = detokenize(tokenize(x, ps, tw), ps, dw, 1);
    // direct oracle: the smoothing stencil applied to the original image with zero padding
    for (int r = 0; r < 16; ++r) {
      for (int c = 0; c < 16; ++c) {
        double s = 0;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            if (r + dr < 0 || r + dr >= 16 || c + dc < 0 || c + dc >= 16) continue;
            s += stencil[(dr + 1) * 3 + dc + 1] * img(r + dr, c + dc);
          }
        CHECK(back.at(r * 16 + c) == doctest::Approx(s).epsilon(1e-12));
      }
    }
  }
  SUBCASE("count mismatch") {
    const PatchSet ps = uniform_patches(4, 4, 2);
    DetokenizerWeights<double> w{TD::zeros({2, 4}), TD::zeros({4}), TD::zeros({1, 1, 3, 3}), TD::zeros({1})};
    CHECK_THROWS_AS(detokenize(TD::zeros({3, 2}), ps, w, 1), ShapeError);
  }
}
