#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "bendlens/adam.hpp"
#include "bendlens/binary_io.hpp"
#include "bendlens/checkpoint.hpp"
#include "bendlens/gradcheck.hpp"
#include "bendlens/layers.hpp"
#include "bendlens/ops.hpp"

using namespace bendlens;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero so relu/maxpool kinks are never crossed by
// a finite-difference probe.
Tensor kink_free_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    const double mag = 0.1 + rng.uniform();
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor weighted_sum(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

}  // namespace

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 3}, {}), ShapeError);
  Tensor t({2, 3}, std::vector<double>(6, 1.0), true);
  CHECK(t.size() == 6);
  CHECK(t.grad().size() == 6);
}

TEST_CASE("forward: identity examples") {
  Rng rng(0);
  SUBCASE("dense with identity weight and zero bias") {
    Layer dense("d", LayerSpec::dense(3, 3), rng);
    auto params = dense.parameters();
    auto w = params[0].tensor.mutable_data();
    for (std::size_t i = 0; i < 9; ++i) w[i] = (i % 4 == 0) ? 1.0 : 0.0;
    Tensor x({2, 3}, {1, -2, 3, 0.5, 4, -6});
    auto y = dense.forward(x, Mode::eval, rng);
    for (std::size_t i = 0; i < 6; ++i) CHECK(y.at(i) == x.at(i));
  }
  SUBCASE("relu and sigmoid") {
    CHECK(ops::relu(Tensor::scalar(-1.0)).item() == 0.0);
    CHECK(ops::sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  }
  SUBCASE("1x1 conv with unit weight") {
    Layer conv("c", LayerSpec::conv2d(1, 1, 1, 1, 0), rng);
    auto params = conv.parameters();
    params[0].tensor.mutable_data()[0] = 1.0;
    auto x = random_tensor({2, 1, 4, 5}, rng, 1.0, false);
    auto y = conv.forward(x, Mode::eval, rng);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.at(i) == x.at(i));
  }
}

TEST_CASE("forward: shape mismatch names the layer and both shapes") {
  Rng rng(1);
  Layer dense("encoder.fc", LayerSpec::dense(4, 2), rng);
  Tensor x = Tensor::zeros({3, 5});
  try {
    dense.forward(x, Mode::eval, rng);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("encoder.fc") != std::string::npos);
    CHECK(msg.find("[N, 4]") != std::string::npos);
    CHECK(msg.find("[3, 5]") != std::string::npos);
  }
}

TEST_CASE("layer spec validation and conv arithmetic") {
  CHECK_THROWS(LayerSpec::dense(0, 3).validate());
  CHECK_THROWS(LayerSpec::dropout(1.0).validate());
  CHECK_NOTHROW(LayerSpec::dropout(0.0).validate());
  CHECK_THROWS(LayerSpec::transposed_conv2d(2, 2, 3, 2, 1, 2).validate());
  // Stride-2 "same" convs halve 16 -> 8 -> 4 -> 2; mirrored transposed convs double back.
  auto conv = LayerSpec::conv2d(2, 8, 3, 2, 1);
  CHECK(conv.output_shape({5, 2, 16, 16}) == Shape{5, 8, 8, 8});
  auto up = LayerSpec::transposed_conv2d(8, 4, 3, 2, 1, 1);
  CHECK(up.output_shape({5, 8, 2, 2}) == Shape{5, 4, 4, 4});
  CHECK_THROWS_AS(LayerSpec::conv2d(1, 1, 5, 1, 0).output_shape({1, 1, 3, 3}), ShapeError);
}

TEST_CASE("backward examples") {
  SUBCASE("sum(w*w) at (1, 2)") {
    Tensor w({2}, {1.0, 2.0}, true);
    ops::sum(ops::mul(w, w)).backward();
    CHECK(w.grad()[0] == 2.0);
    CHECK(w.grad()[1] == 4.0);
  }
  SUBCASE("constant loss gives zero gradient") {
    Tensor w({2}, {1.0, 2.0}, true);
    Tensor c({1}, {3.0}, true);
    auto loss = ops::sum(ops::mul(c, c));
    loss.backward();
    CHECK(w.grad()[0] == 0.0);
    CHECK(w.grad()[1] == 0.0);
  }
  SUBCASE("sigmoid(w) * c against central differences") {
    const double c = 2.5;
    Tensor w = Tensor::scalar(0.0, true);
    auto loss_fn = [&] { return ops::scale(ops::sigmoid(w), c); };
    loss_fn().backward();
    // Independent oracle: finite difference of the closed form c / (1 + e^-w).
    const double h = 1e-5;
    const double numeric = (c / (1 + std::exp(-h)) - c / (1 + std::exp(h))) / (2 * h);
    CHECK(std::abs(w.grad()[0] - numeric) / std::abs(numeric) < 1e-6);
    CHECK(w.grad()[0] == doctest::Approx(c * 0.25).epsilon(1e-12));
  }
  SUBCASE("non-scalar loss rejected") {
    Tensor w({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(ops::mul(w, w).backward(), ShapeError);
  }
}

TEST_CASE("adam step") {
  SUBCASE("first step moves by about lr * sign(g)") {
    Tensor w = Tensor::scalar(1.0, true);
    Adam adam({{"w", w}}, {.learning_rate = 0.1, .epsilon = 1e-8});
    ops::scale(w, 0.5).backward();  // g = 0.5
    adam.step();
    // m_hat = g, v_hat = g^2  =>  w -= 0.1 * 0.5 / (0.5 + 1e-8)
    CHECK(w.item() == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-15));
    CHECK(adam.step_count() == 1);

    Tensor u = Tensor::scalar(1.0, true);
    Adam adam2({{"u", u}}, {.learning_rate = 0.1});
    ops::scale(u, -3.0).backward();
    adam2.step();
    CHECK(u.item() == doctest::Approx(1.1).epsilon(1e-8));
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor w({3}, {1.0, -2.0, 3.0}, true);
    Adam adam({{"w", w}}, {});
    w.grad();
    adam.step();
    CHECK(w.at(0) == 1.0);
    CHECK(w.at(1) == -2.0);
    CHECK(w.at(2) == 3.0);
  }
  SUBCASE("identical states give identical results") {
    auto run = [] {
      Tensor w({2}, {0.3, -0.7}, true);
      Adam adam({{"w", w}}, {.learning_rate = 0.01});
      for (int i = 0; i < 5; ++i) {
        adam.zero_grad();
        ops::sum(ops::mul(ops::square(w), w)).backward();
        adam.step();
      }
      return std::vector<double>(w.data().begin(), w.data().end());
    };
    CHECK(run() == run());
  }
  SUBCASE("non-finite gradient aborts naming the parameter") {
    Tensor w = Tensor::scalar(0.0, true);
    Adam adam({{"decoder.weight", w}}, {});
    ops::log(w).backward();  // 1/0
    try {
      adam.step();
      FAIL("expected NonFiniteGradient");
    } catch (const NonFiniteGradient& e) {
      CHECK(std::string(e.what()).find("decoder.weight") != std::string::npos);
    }
    CHECK(w.item() == 0.0);
    CHECK(adam.step_count() == 0);
  }
}

TEST_CASE("grad_check examples") {
  SUBCASE("dense 3->2 with MSE, seed 0") {
    Rng rng(0);
    Layer dense("fc", LayerSpec::dense(3, 2), rng);
    auto x = random_tensor({4, 3}, rng, 1.0, false);
    auto target = random_tensor({4, 2}, rng, 1.0, false);
    auto loss = [&] {
      Rng r(0);
      return ops::mean(ops::square(ops::sub(dense.forward(x, Mode::train, r), target)));
    };
    CHECK(grad_check(loss, dense.parameters(), 1e-6).max_error <= 1e-4);
  }
  SUBCASE("relu away from zero") {
    Rng rng(3);
    auto x = kink_free_tensor({10}, rng);
    auto w = random_tensor({10}, rng, 1.0, false);
    auto loss = [&] { return weighted_sum(ops::relu(x), w); };
    CHECK(grad_check(loss, {{"x", x}}, 1e-6).max_error <= 1e-6);
  }
  SUBCASE("batchnorm train mode, batch 4") {
    Rng rng(5);
    Layer bn("bn", LayerSpec::batchnorm(3), rng);
    auto x = random_tensor({4, 3}, rng);
    auto w = random_tensor({4, 3}, rng, 1.0, false);
    auto params = bn.parameters();
    params.push_back({"x", x});
    auto loss = [&] {
      Rng r(0);
      return weighted_sum(bn.forward(x, Mode::train, r), w);
    };
    CHECK(grad_check(loss, params, 1e-6).max_error <= 1e-4);
  }
  SUBCASE("eps outside [1e-6, 1e-3] rejected") {
    Tensor x = Tensor::scalar(1.0, true);
    CHECK_THROWS(grad_check([&] { return ops::square(x); }, {{"x", x}}, 1e-2));
  }
}

// Every layer kind on randomized small shapes across 20 seeds.
TEST_CASE("grad_check: every layer kind over 20 seeds") {
  const std::vector<std::pair<LayerSpec, Shape>> cases = {
      {LayerSpec::dense(5, 3), {4, 5}},
      {LayerSpec::conv2d(2, 3, 3, 2, 1), {2, 2, 6, 6}},
      {LayerSpec::conv2d(2, 2, 3, 1, 0), {2, 2, 5, 4}},
      {LayerSpec::transposed_conv2d(3, 2, 3, 2, 1, 1), {2, 3, 3, 3}},
      {LayerSpec::batchnorm(3), {5, 3}},
      {LayerSpec::batchnorm(2), {3, 2, 2, 3}},
      {LayerSpec::relu(), {3, 4}},
      {LayerSpec::sigmoid(), {3, 4}},
      {LayerSpec::dropout(0.3), {4, 6}},
      {LayerSpec::maxpool2d(2), {2, 2, 4, 4}},
  };
  for (const auto& [spec, shape] : cases) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      Layer layer("l", spec, rng);
      auto x = (spec.kind == LayerKind::relu || spec.kind == LayerKind::maxpool2d)
                   ? kink_free_tensor(shape, rng)
                   : random_tensor(shape, rng);
      auto w = random_tensor(spec.output_shape(shape), rng, 1.0, false);
      auto wrt = layer.parameters();
      wrt.push_back({"input", x});
      auto loss = [&] {
        Rng r(seed + 100);
        return weighted_sum(layer.forward(x, Mode::train, r), w);
      };
      worst = std::max(worst, grad_check(loss, wrt, 1e-6).max_error);
    }
    INFO("layer kind " << to_string(spec.kind));
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("dropout: eval identity and train-mode Monte Carlo mean") {
  Rng rng(7);
  Tensor x = Tensor::full({1, 20000}, 2.0);
  auto eval = ops::dropout(x, 0.2, false, rng);
  for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(eval.at(i) == 2.0);
  auto train = ops::dropout(x, 0.2, true, rng);
  double s = 0.0, s2 = 0.0;
  for (double v : train.data()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(train.size());
  const double m = s / n;
  const double se = std::sqrt((s2 / n - m * m) / n);
  CHECK(std::abs(m - 2.0) <= 3.0 * se);
}

TEST_CASE("batchnorm train output is standardized per feature") {
  Rng rng(11);
  Layer bn("bn", LayerSpec::batchnorm(4), rng);
  auto x = random_tensor({16, 4}, rng, 3.0, false);
  auto y = bn.forward(x, Mode::train, rng);
  for (std::size_t f = 0; f < 4; ++f) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 16; ++i) m += y.at(i * 4 + f);
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) v += std::pow(y.at(i * 4 + f) - m, 2);
    v /= 16;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-6);
  }
  // Eval mode uses the running statistics that training moved.
  auto state = bn.state();
  CHECK(state[2].tensor.at(0) != 0.0);
  auto ye = bn.forward(x, Mode::eval, rng);
  CHECK(ye.at(0) != doctest::Approx(y.at(0)));
}

TEST_CASE("determinism of a short training run") {
  auto run = [] {
    Rng init(42);
    Sequential net("net");
    net.add(LayerSpec::conv2d(1, 2, 3, 2, 1), init)
        .add(LayerSpec::batchnorm(2), init)
        .add(LayerSpec::relu(), init);
    Layer head("head", LayerSpec::dense(8, 1), init);
    auto params = net.parameters();
    append(params, head.parameters());
    Adam adam(params, {.learning_rate = 0.01});
    Rng data(1);
    auto x = random_tensor({3, 1, 4, 4}, data, 1.0, false);
    Rng noise(9);
    for (int i = 0; i < 10; ++i) {
      adam.zero_grad();
      auto h = ops::flatten(net.forward(x, Mode::train, noise));
      ops::mean(ops::square(head.forward(h, Mode::train, noise))).backward();
      adam.step();
    }
    return encode_checkpoint(params);
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip and corruption classes") {
  Rng rng(2);
  Layer a("fc", LayerSpec::dense(3, 2), rng);
  auto bytes = encode_checkpoint(a.state());
  auto stored = decode_checkpoint(bytes);
  REQUIRE(stored.size() == 2);
  CHECK(stored[0].name == "fc.weight");
  CHECK(stored[0].shape == Shape{2, 3});
  CHECK(encode_checkpoint(a.state()) == bytes);

  Layer b("fc", LayerSpec::dense(3, 2), rng);
  auto target = b.state();
  restore(stored, target);
  CHECK(encode_checkpoint(b.state()) == bytes);

  // Layout check against hand-built header: magic, version 1, name length 9.
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "BLNS");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 9);

  auto expect = [](std::vector<std::uint8_t> data, FormatErrorKind kind, const char* text) {
    try {
      decode_checkpoint(data);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.kind() == kind);
      CHECK(std::string(e.what()).rfind(text, 0) == 0);
    }
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  expect(bad_magic, FormatErrorKind::bad_magic, "bad magic");
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  expect(truncated, FormatErrorKind::unexpected_eof, "unexpected EOF");
  auto version = bytes;
  version[4] = 2;
  expect(version, FormatErrorKind::unsupported_version, "unsupported version");

  Layer c("fc", LayerSpec::dense(3, 3), rng);
  auto wrong = c.state();
  CHECK_THROWS_AS(restore(stored, wrong), FormatError);
}
