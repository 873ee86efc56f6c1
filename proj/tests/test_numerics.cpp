#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include "downscale/adam.hpp"
#include "downscale/checkpoint.hpp"
#include "downscale/detail/binary_io.hpp"
#include "downscale/error.hpp"
#include "downscale/flops.hpp"
#include "downscale/ops.hpp"
#include "gradient_cases.hpp"

using namespace downscale;
using testing::random_tensor;
using TD = Tensor<double>;

TEST_CASE("every primitive passes the finite-difference check") {
  for (const auto& c : testing::primitive_gradient_checks(2024)) {
    INFO(c.name, " max abs error ", c.result.max_abs);
    CHECK(c.result.checked > 0);
    CHECK(c.result.max_abs <= 1e-7);
  }
}

TEST_CASE("micro model gradients") {
  for (bool compression : {false, true}) {
    const auto c = testing::micro_model_gradient_check(5, compression);
    INFO(c.name, " max rel error ", c.result.max_rel);
    CHECK(c.result.max_rel <= 1e-4);
  }
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    std::mt19937_64 rng(1);
    const TD m = random_tensor({3, 4}, rng, -1, 1, false);
    const TD eye = TD::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const TD r = matmul(eye, m);
    CHECK(std::equal(r.values().begin(), r.values().end(), m.values().begin()));
  }
  SUBCASE("scalar chain rule") {
    TD a = TD::from_values({1, 1}, {2}, true), b = TD::from_values({1, 1}, {3}, true);
    const TD c = matmul(a, b);
    CHECK(c.item() == 6);
    backward(scale(sum(c), 5.0));
    CHECK(a.grad()[0] == 15);
    CHECK(b.grad()[0] == 10);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), ShapeError);
  }
  SUBCASE("ledger") {
    const auto ledger = with_flop_ledger([] { matmul(TD::zeros({4, 5}), TD::zeros({5, 3})); });
    CHECK(ledger.matmul == 60);
  }
}

TEST_CASE("conv2d") {
  SUBCASE("unit 1x1 kernel") {
    std::mt19937_64 rng(2);
    const TD x = random_tensor({1, 4, 5}, rng, -1, 1, false);
    const TD y = conv2d(x, TD::full({1, 1, 1, 1}, 1.0));
    CHECK(std::equal(y.values().begin(), y.values().end(), x.values().begin()));
  }
  SUBCASE("averaging kernel on a constant field") {
    const double c = 2.5;
    const TD y = conv2d(TD::full({1, 5, 6}, c), TD::full({1, 1, 3, 3}, 1.0 / 9));
    // direct oracle: each output is c times the in-bounds fraction of the stencil
    for (int r = 0; r < 5; ++r) {
      for (int col = 0; col < 6; ++col) {
        int inside = 0;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) inside += (r + dr >= 0 && r + dr < 5 && col + dc >= 0 && col + dc < 6);
        CHECK(y.at(r * 6 + col) == doctest::Approx(c * inside / 9.0).epsilon(1e-12));
      }
    }
  }
  SUBCASE("ledger and validation") {
    const auto ledger = with_flop_ledger([] { conv2d(TD::zeros({2, 6, 7}), TD::zeros({3, 2, 3, 3})); });
    CHECK(ledger.conv == 3u * 2 * 9 * 6 * 7);
    CHECK_THROWS_AS(conv2d(TD::zeros({1, 2, 2}), TD::zeros({1, 1, 5, 5}), Padding::valid), ShapeError);
    CHECK_THROWS_AS(conv2d(TD::zeros({1, 4, 4}), TD::zeros({1, 1, 2, 2})), ShapeError);
  }
}

TEST_CASE("upsample_bilinear") {
  std::mt19937_64 rng(3);
  const TD x = random_tensor({2, 3, 4}, rng, -1, 1, false);
  const TD one = upsample_bilinear(x, 1);
  CHECK(std::equal(one.values().begin(), one.values().end(), x.values().begin()));
  const TD c = upsample_bilinear(TD::full({1, 3, 3}, 5.0), 4);
  for (double v : c.values()) CHECK(v == 5.0);
  CHECK_THROWS_AS(upsample_bilinear(x, 0), ShapeError);

  // independent oracle: half-pixel centres, clamped source coordinates
  const TD ramp = TD::from_values({1, 2, 2}, {0, 1, 2, 3});
  const TD up = upsample_bilinear(ramp, 2);
  auto src = [](int i) { return std::clamp((i + 0.5) / 2 - 0.5, 0.0, 1.0); };
  for (int r = 0; r < 4; ++r) {
    for (int col = 0; col < 4; ++col) {
      const double y = src(r), xx = src(col);
      const double expect = (1 - y) * ((1 - xx) * 0 + xx * 1) + y * ((1 - xx) * 2 + xx * 3);
      CHECK(up.at(r * 4 + col) == doctest::Approx(expect).epsilon(1e-9));
    }
  }
}

TEST_CASE("attention") {
  std::mt19937_64 rng(4);
  SUBCASE("single token returns v") {
    const TD q = random_tensor({1, 3}, rng, -1, 1, false), k = random_tensor({1, 3}, rng, -1, 1, false),
             v = random_tensor({1, 3}, rng, -1, 1, false);
    const TD o = attention(q, k, v);
    CHECK(std::equal(o.values().begin(), o.values().end(), v.values().begin()));
  }
  SUBCASE("identical keys give the mean of v") {
    const TD q = random_tensor({5, 4}, rng, -1, 1, false);
    const TD k = TD::full({5, 4}, 0.3);
    const TD v = random_tensor({5, 4}, rng, -1, 1, false);
    const TD o = attention(q, k, v);
    for (std::size_t j = 0; j < 4; ++j) {
      double m = 0;
      for (std::size_t i = 0; i < 5; ++i) m += v.at(i * 4 + j) / 5;
      for (std::size_t i = 0; i < 5; ++i) CHECK(o.at(i * 4 + j) == doctest::Approx(m).epsilon(1e-12));
    }
  }
  SUBCASE("convex hull of v rows") {
    const TD q = random_tensor({7, 2}, rng, -3, 3, false), k = random_tensor({7, 2}, rng, -3, 3, false),
             v = random_tensor({7, 2}, rng, -1, 1, false);
    const TD o = attention(q, k, v);
    for (std::size_t j = 0; j < 2; ++j) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t i = 0; i < 7; ++i) {
        lo = std::min(lo, v.at(i * 2 + j));
        hi = std::max(hi, v.at(i * 2 + j));
      }
      for (std::size_t i = 0; i < 7; ++i) {
        CHECK(o.at(i * 2 + j) >= lo - 1e-12);
        CHECK(o.at(i * 2 + j) <= hi + 1e-12);
      }
    }
  }
  SUBCASE("ledger") {
    const TD q = random_tensor({6, 4}, rng, -1, 1, false);
    CHECK(with_flop_ledger([&] { attention(q, q, q); }).attention == 288);
    const TD big = TD::zeros({100, 8});
    CHECK(with_flop_ledger([&] { attention(big, big, big); }).attention == 160000);
    const TD twice = TD::zeros({200, 8});
    CHECK(with_flop_ledger([&] { attention(twice, twice, twice); }).attention == 4 * 160000);
  }
  CHECK_THROWS(attention(TD::zeros({3, 0}), TD::zeros({3, 0}), TD::zeros({3, 0})));
}

TEST_CASE("layer_norm rows are standardized") {
  std::mt19937_64 rng(6);
  const TD x = random_tensor({4, 8}, rng, -5, 5, false);
  const TD y = layer_norm(x, TD::full({8}, 1.0), TD::zeros({8}));
  for (std::size_t i = 0; i < 4; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 8; ++j) m += y.at(i * 8 + j) / 8;
    for (std::size_t j = 0; j < 8; ++j) v += (y.at(i * 8 + j) - m) * (y.at(i * 8 + j) - m) / 8;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("backward") {
  SUBCASE("sum gives ones") {
    TD x = TD::from_values({2, 2}, {1, 2, 3, 4}, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("square") {
    TD x = TD::from_values({1}, {3}, true);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 6.0);
  }
  SUBCASE("stale graph and non-scalar loss") {
    TD x = TD::from_values({2}, {1, 2}, true);
    const TD loss = sum(mul(x, x));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), GraphError);
    CHECK_THROWS_AS(backward(mul(x, x)), ShapeError);
  }
  SUBCASE("no recording without grad mode") {
    TD x = TD::from_values({2}, {1, 2}, true);
    NoGradGuard guard;
    const TD y = mul(x, x);
    CHECK(y.is_leaf());
  }
}

TEST_CASE("flop scopes nest into the innermost") {
  FlopLedger outer_seen;
  {
    FlopScope outer;
    credit_flops(FlopCategory::other, 5);
    {
      FlopScope inner;
      credit_flops(FlopCategory::matmul, 7);
      CHECK(inner.ledger().matmul == 7);
      CHECK(outer.ledger().matmul == 0);
    }
    outer_seen = outer.ledger();
  }
  CHECK(outer_seen.matmul == 7);
  CHECK(outer_seen.other == 5);
  CHECK(with_flop_ledger([] {}) == FlopLedger{});
  const auto [value, ledger] = with_flop_ledger([] { return 42; });
  CHECK(value == 42);
  CHECK(ledger.total() == 0);
  // scopes are per thread
  FlopScope here;
  std::thread([] { credit_flops(FlopCategory::conv, 9); }).join();
  CHECK(here.ledger().conv == 0);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters") {
    TD p = TD::from_values({3}, {1, 2, 3}, true);
    p.zero_grad();
    AdamState<double> s;
    std::vector<TD*> ps{&p};
    adam_step(std::span<TD* const>(ps), s);
    CHECK(p.at(0) == 1.0);
    CHECK(p.at(2) == 3.0);
  }
  SUBCASE("first step has unit size") {
    TD p = TD::from_values({1}, {0}, true);
    AdamState<double> s;
    s.lr = 0.1;
    std::vector<TD*> ps{&p};
    p.mutable_grad()[0] = 1.0;
    adam_step(std::span<TD* const>(ps), s);
    CHECK(p.at(0) == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(p.grad()[0] == 0.0);
  }
  SUBCASE("lr zero is bit identical") {
    std::mt19937_64 rng(8);
    TD p = random_tensor({5}, rng);
    const std::vector<double> before(p.values().begin(), p.values().end());
    for (auto& g : p.mutable_grad()) g = 0.37;
    AdamState<double> s;
    s.lr = 0;
    std::vector<TD*> ps{&p};
    adam_step(std::span<TD* const>(ps), s);
    CHECK(std::equal(before.begin(), before.end(), p.values().begin()));
  }
  SUBCASE("quadratic bowl") {
    TD p = TD::from_values({2}, {1.5, -0.8}, true);
    AdamState<double> s;
    s.lr = 0.05;
    std::vector<TD*> ps{&p};
    int steps = 0;
    while (steps < 500 && std::hypot(p.at(0), p.at(1)) >= 1e-3) {
      backward(sum(mul(p, p)));
      adam_step(std::span<TD* const>(ps), s);
      ++steps;
    }
    CHECK(std::hypot(p.at(0), p.at(1)) < 1e-3);
  }
  SUBCASE("missing gradient") {
    TD p = TD::from_values({1}, {0}, true);
    p.clear_grad();
    AdamState<double> s;
    std::vector<TD*> ps{&p};
    CHECK_THROWS_AS(adam_step(std::span<TD* const>(ps), s), GraphError);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = testing::scratch_dir("ckpt");
  std::mt19937_64 rng(9);
  const TD a = random_tensor({2, 3, 4}, rng);
  const TD b = random_tensor({5}, rng);
  const std::vector<StoredTensor> saved{store("layer.a", a), store("b", b)};
  const auto path = (dir / "w.ckpt").string();
  write_checkpoint(path, saved);
  const auto back = read_checkpoint(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "layer.a");
  CHECK(back[0].shape == Shape{2, 3, 4});
  CHECK(back[0].values == saved[0].values);
  CHECK(back[1].values == saved[1].values);

  auto bytes = detail::read_file(path);
  bytes[bytes.size() / 2] ^= std::byte{1};
  {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(read_checkpoint(path), FormatError);
  std::filesystem::remove_all(dir);
}
