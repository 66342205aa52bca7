#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bendlens/binary_io.hpp"
#include "bendlens/fiber.hpp"
#include "bendlens/rng.hpp"

using namespace bendlens;

namespace {

// Straightforward two-pass Pearson correlation used as the reference.
double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    da += (a[i] - ma) * (a[i] - ma);
    db += (b[i] - mb) * (b[i] - mb);
  }
  return num / std::sqrt(da * db);
}

double reference_psnr(const std::vector<double>& x, const std::vector<double>& ref) {
  double mse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mse += (x[i] - ref[i]) * (x[i] - ref[i]);
  mse /= static_cast<double>(x.size());
  return 10.0 * std::log10(1.0 / mse);
}

std::vector<double> random_image(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (auto& v : x) v = rng.uniform();
  x[0] = 0.0;
  x[1] = 1.0;
  return x;
}

}  // namespace

TEST_CASE("config grid") {
  SUBCASE("11 points follow the arm and rotation sweep") {
    const auto grid = make_config_grid(11);
    REQUIRE(grid.size() == 11);
    CHECK(grid.front().id == "C_10");
    CHECK(grid.back().id == "C_0");
    for (std::size_t i = 0; i < 11; ++i) {
      CHECK(grid[i].id == "C_" + std::to_string(10 - i));
      CHECK(grid[i].arm_position_mm == doctest::Approx(10.0 - static_cast<double>(i)));
      CHECK(grid[i].rotation_deg == doctest::Approx(230.0 + 5.0 * static_cast<double>(i)));
    }
  }
  SUBCASE("two points are the endpoints") {
    const auto grid = make_config_grid(2);
    REQUIRE(grid.size() == 2);
    CHECK(grid[0].bend == 0.0);
    CHECK(grid[1].bend == 1.0);
  }
  SUBCASE("bend strictly increasing") {
    for (std::size_t count : {2, 3, 7, 11, 40}) {
      const auto grid = make_config_grid(count);
      for (std::size_t i = 1; i < grid.size(); ++i) CHECK(grid[i].bend > grid[i - 1].bend);
    }
  }
  CHECK_THROWS_AS(make_config_grid(1), std::invalid_argument);
}

TEST_CASE("ensemble invariants") {
  const auto grid = make_config_grid(11);
  for (auto mode : {IlluminationMode::random, IlluminationMode::wavefront_shaped}) {
    const auto e = gen_speckle_ensemble(32, 64, grid, mode, 2.0 / M_PI, 5);
    for (const auto& a : e.matrices) {
      for (std::size_t i = 0; i < a.rows; ++i) {
        const auto row = a.row(i);
        CHECK(*std::min_element(row.begin(), row.end()) >= 0.0);
        CHECK(*std::max_element(row.begin(), row.end()) == 1.0);
      }
      CHECK(speckle_correlation(a, a) == 1.0);
    }
  }
  CHECK_THROWS_AS(SpeckleGenerator(0, 4, IlluminationMode::random, 1.0, 0), std::invalid_argument);
  CHECK_THROWS_AS(SpeckleGenerator(4, 4, IlluminationMode::random, 0.0, 0), std::invalid_argument);
}

TEST_CASE("wavefront-shaped rows are focal spots at t = 0") {
  const std::size_t m = 64, n = 256;
  SpeckleGenerator gen(m, n, IlluminationMode::wavefront_shaped, 2.0 / M_PI, 11);
  const auto a = gen.matrix(0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = a.row(i);
    const std::size_t peak = i * n / m;
    CHECK(row[peak] == 1.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != peak) CHECK(row[peak] >= 10.0 * row[j]);
    }
  }
}

TEST_CASE("monotone decorrelation on the 11-point grid") {
  const auto grid = make_config_grid(11);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (auto mode : {IlluminationMode::random, IlluminationMode::wavefront_shaped}) {
      SpeckleGenerator gen(64, 256, mode, 2.0 / M_PI, seed);
      const auto a0 = gen.matrix(0.0);
      double prev = 1.0;
      for (const auto& c : grid) {
        const auto at = gen.matrix(c.bend);
        const double r = pearson(a0.values, at.values);
        CHECK(speckle_correlation(a0, at) == doctest::Approx(r).epsilon(1e-12));
        CHECK(r <= prev + 0.02);
        prev = r;
      }
      CHECK(prev < 0.5);
    }
  }
}

TEST_CASE("speckle correlation examples") {
  SpeckleGenerator gen(16, 16, IlluminationMode::random, 1.0, 2);
  const auto a = gen.matrix(0.3);
  Matrix neg = a;
  for (auto& v : neg.values) v = 3.0 - v;
  CHECK(speckle_correlation(a, a) == 1.0);
  CHECK(speckle_correlation(a, neg) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_THROWS_AS(speckle_correlation(a, Matrix(16, 16, 0.5)), std::invalid_argument);
  CHECK_THROWS_AS(speckle_correlation(a, Matrix(16, 8, 0.5)), std::invalid_argument);

  for (std::uint64_t pair = 0; pair < 10; ++pair) {
    SpeckleGenerator g1(128, 128, IlluminationMode::random, 1.0, 100 + 2 * pair);
    SpeckleGenerator g2(128, 128, IlluminationMode::random, 1.0, 101 + 2 * pair);
    const double r = speckle_correlation(g1.matrix(0.0), g2.matrix(0.0));
    CHECK(std::abs(r) < 0.05);
  }
}

TEST_CASE("forward measure") {
  Matrix eye(2, 2);
  eye(0, 0) = eye(1, 1) = 1.0;
  const std::vector<double> x{1.0, 0.0};
  CHECK(forward_measure(eye, x, 0.0).values == std::vector<double>{1.0, 0.0});
  CHECK(forward_measure(eye, std::vector<double>{0.0, 0.0}).values ==
        std::vector<double>{0.0, 0.0});
  CHECK(forward_measure(eye, x).noise_std == 0.015);
  CHECK_THROWS_AS(forward_measure(eye, std::vector<double>{1.0}), std::invalid_argument);

  SUBCASE("linearity with noise off") {
    SpeckleGenerator gen(32, 64, IlluminationMode::random, 1.0, 9);
    const auto a = gen.matrix(0.4);
    // Dyadic values keep every product and sum exact in binary floating point.
    std::vector<double> x1(64), x2(64), mix(64);
    Rng rng(4);
    const double alpha = 0.25;
    for (std::size_t i = 0; i < 64; ++i) {
      x1[i] = static_cast<double>(rng.below(17)) / 16.0;
      x2[i] = static_cast<double>(rng.below(17)) / 16.0;
      mix[i] = alpha * x1[i] + (1 - alpha) * x2[i];
    }
    const auto y1 = forward_measure(a, x1, 0.0).values;
    const auto y2 = forward_measure(a, x2, 0.0).values;
    const auto ym = forward_measure(a, mix, 0.0).values;
    for (std::size_t i = 0; i < ym.size(); ++i) {
      CHECK(ym[i] == doctest::Approx(alpha * y1[i] + (1 - alpha) * y2[i]).epsilon(1e-13));
    }
  }
}

TEST_CASE("normalization") {
  SUBCASE("hand-computed two-channel example") {
    const std::vector<double> ax{2.0, 4.0}, w{1.0, 1.0}, b{0.0, 0.0};
    const auto y = apply_normalization(ax, 2.0, w, b);
    CHECK(y.values == std::vector<double>{0.0, 1.0, 0.0, 1.0});
    CHECK_FALSE(y.degenerate);
  }
  SUBCASE("single channel selections") {
    const std::vector<double> ax{1.0, 3.0, 2.0}, w{4.0, 1.0, 2.0}, b{0.0, 0.5, 1.0};
    const auto first = apply_normalization(ax, 1.0, w, b, NormalizationChannels::first);
    CHECK(first.values == std::vector<double>{0.0, 1.0, 0.5});
    // (Ax - b)/(w - b) = (0.25, 5, 1) -> range-normalized by hand.
    const auto second = apply_normalization(ax, 1.0, w, b, NormalizationChannels::second);
    REQUIRE(second.values.size() == 3);
    CHECK(second.values[0] == 0.0);
    CHECK(second.values[1] == 1.0);
    CHECK(second.values[2] == doctest::Approx(0.75 / 4.75));
  }
  SUBCASE("constant input is degenerate") {
    const std::vector<double> ax{3.0, 3.0, 3.0}, w{1.0, 1.0, 1.0}, b{0.0, 0.0, 0.0};
    const auto y = apply_normalization(ax, 10.0, w, b);
    CHECK(y.degenerate);
    CHECK(std::all_of(y.values.begin(), y.values.end(), [](double v) { return v == 0.0; }));
  }
  SUBCASE("preconditions") {
    const std::vector<double> ax{1.0, 2.0}, w{1.0, 1.0}, b{0.0, 0.0}, bad_b{0.0, 1.0};
    CHECK_THROWS_AS(apply_normalization(ax, 0.0, w, b), std::invalid_argument);
    CHECK_THROWS_AS(apply_normalization(ax, 1.0, w, bad_b), std::invalid_argument);
    CHECK_THROWS_AS(apply_normalization(ax, 1.0, std::vector<double>{1.0}, b),
                    std::invalid_argument);
  }
  SUBCASE("damping defaults") {
    CHECK(kDampingExperiment1 == 10.0);
    CHECK(kDampingExperiment2 == 200.0);
  }
  CHECK(parse_normalization_channels("second") == NormalizationChannels::second);
  CHECK_THROWS(parse_normalization_channels("third"));
}

TEST_CASE("simulated backgrounds") {
  SpeckleGenerator gen(8, 16, IlluminationMode::random, 1.0, 3);
  const auto a = gen.matrix(0.5);
  const auto bg = simulate_backgrounds(a);
  for (std::size_t i = 0; i < 8; ++i) {
    const auto row = a.row(i);
    CHECK(bg.white[i] == doctest::Approx(std::accumulate(row.begin(), row.end(), 0.0)));
    CHECK(bg.black[i] == doctest::Approx(0.02 * bg.white[i]));
    CHECK(bg.white[i] > bg.black[i]);
  }
}

TEST_CASE("raw measurements show the object only under wavefront shaping") {
  const std::size_t side = 16, n = side * side;
  SpeckleGenerator gen(n, n, IlluminationMode::wavefront_shaped, 2.0 / M_PI, 21);
  const auto x = random_image(n, 8);
  const std::vector<double> ones(n, 1.0), zeros(n, 0.0);
  auto channel1 = [&](double t) {
    const auto a = gen.matrix(t);
    return apply_normalization(forward_measure(a, x, 0.0).values, 10.0, ones, zeros,
                               NormalizationChannels::first)
        .values;
  };
  const auto y0 = channel1(0.0);
  const auto y1 = channel1(1.0);
  const double p0 = reference_psnr(y0, x);
  const double p1 = reference_psnr(y1, x);
  CHECK(p0 > 100.0);
  CHECK(p0 > p1);
  CHECK(p1 < 20.0);
}

TEST_CASE("generation is deterministic") {
  const auto grid = make_config_grid(5);
  const auto e1 = gen_speckle_ensemble(16, 32, grid, IlluminationMode::random, 1.0, 77);
  const auto e2 = gen_speckle_ensemble(16, 32, grid, IlluminationMode::random, 1.0, 77);
  const auto e3 = gen_speckle_ensemble(16, 32, grid, IlluminationMode::random, 1.0, 78);
  CHECK(encode_ensemble(e1) == encode_ensemble(e2));
  CHECK(ensemble_hash(e1) == ensemble_hash(e2));
  CHECK(ensemble_hash(e1) != ensemble_hash(e3));
}

TEST_CASE("SPKL round trip and corruption classes") {
  const auto grid = make_config_grid(3);
  const auto e = gen_speckle_ensemble(4, 6, grid, IlluminationMode::wavefront_shaped, 0.5, 1);
  const auto bytes = encode_ensemble(e);
  const auto back = decode_ensemble(bytes);
  CHECK(back.patterns == 4);
  CHECK(back.pixels == 6);
  CHECK(back.matrices == e.matrices);
  CHECK(back.configurations == e.configurations);
  CHECK_FALSE(back.provenance.has_value());
  CHECK(back.matrix("C_5") == e.matrix("C_5"));
  CHECK_THROWS_AS(back.matrix("C_4"), std::out_of_range);

  auto expect_kind = [](std::vector<std::uint8_t> b, FormatErrorKind kind) {
    try {
      decode_ensemble(b);
      FAIL("corrupt ensemble accepted");
    } catch (const FormatError& err) {
      CHECK(err.kind() == kind);
      CHECK(std::string(err.what()).rfind(std::string(diagnostic(kind)), 0) == 0);
    }
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_kind(bad_magic, FormatErrorKind::bad_magic);
  expect_kind({bytes.begin(), bytes.end() - 3}, FormatErrorKind::unexpected_eof);
  auto bumped = bytes;
  bumped[4] = 2;
  expect_kind(bumped, FormatErrorKind::unsupported_version);
  auto extra = bytes;
  extra.push_back(0);
  expect_kind(extra, FormatErrorKind::count_mismatch);
}
