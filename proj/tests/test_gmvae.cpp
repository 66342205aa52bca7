#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "bendlens/binary_io.hpp"
#include "bendlens/checkpoint.hpp"
#include "bendlens/fiber.hpp"
#include "bendlens/gmvae.hpp"
#include "bendlens/gradcheck.hpp"
#include "bendlens/gradsuite.hpp"
#include "bendlens/ops.hpp"

using namespace bendlens;

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

MeanSe mean_se(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1.0) / n)};
}

GmvaeArchitecture tiny_arch() {
  GmvaeArchitecture a;
  a.side = 8;
  a.k = 2;
  a.latent = 4;
  a.classifier_hidden = 8;
  a.conv_channels = {2, 4};
  return a;
}

MeasurementDataset tiny_train_set() {
  const auto grid = make_config_grid(3);
  const auto ens = gen_speckle_ensemble(64, 64, grid, IlluminationMode::random, 2.0 / M_PI, 3);
  const std::vector<std::string> ids{grid.front().id, grid.back().id};
  return synthesize_measurements(gen_shapes(24, 2, 8, 5), ens, ids);
}

}  // namespace

TEST_CASE("gumbel softmax rows sum to one and reject non-positive tau") {
  Rng rng(1);
  const Tensor logits = normal_tensor({50, 4}, rng, 3.0);
  const Tensor s = gumbel_softmax_sample(logits, 0.7, rng);
  for (std::size_t i = 0; i < 50; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 4; ++j) sum += s.at(i * 4 + j);
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
  CHECK_THROWS_AS(gumbel_softmax_sample(logits, 0.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(gumbel_softmax_sample(logits, -1.0, rng), std::invalid_argument);
}

TEST_CASE("gumbel softmax at tau 0.01 is nearly one-hot for peaked logits") {
  Rng rng(2);
  std::vector<double> v;
  for (int i = 0; i < 100; ++i) v.insert(v.end(), {10.0, 0.0, 0.0, 0.0});
  const Tensor s = gumbel_softmax_sample(Tensor({100, 4}, v), 0.01, rng);
  int peaked = 0;
  double entropy = 0.0;
  for (std::size_t i = 0; i < 100; ++i) {
    double mx = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      const double p = s.at(i * 4 + j);
      mx = std::max(mx, p);
      if (p > 0.0) entropy -= p * std::log(p);
    }
    if (mx > 0.999) ++peaked;
  }
  CHECK(peaked >= 99);
  CHECK(entropy / 100.0 < 0.05);
}

TEST_CASE("gumbel softmax argmax frequencies match softmax(logits)") {
  // The Gumbel-max identity: argmax(logits + g) ~ Cat(softmax(logits)).
  const std::size_t n = 100000;
  const std::vector<double> p{0.25, 0.25, 0.25, 0.25};
  for (const auto& probs : {p, std::vector<double>{0.1, 0.2, 0.3, 0.4}}) {
    std::vector<double> logits;
    for (std::size_t i = 0; i < n; ++i) {
      for (double q : probs) logits.push_back(std::log(q));
    }
    Rng rng(3);
    const Tensor s = gumbel_softmax_sample(Tensor({n, 4}, logits), 1.0, rng);
    std::vector<double> counts(4, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < 4; ++j) {
        if (s.at(i * 4 + j) > s.at(i * 4 + best)) best = j;
      }
      counts[best] += 1.0;
    }
    for (std::size_t j = 0; j < 4; ++j) {
      const double expected = probs[j] * n;
      const double sigma = std::sqrt(n * probs[j] * (1.0 - probs[j]));
      INFO("class " << j << " count " << counts[j]);
      CHECK(std::abs(counts[j] - expected) <= 3.0 * sigma);
    }
  }
}

TEST_CASE("kl_gaussian_diag closed-form examples") {
  const std::vector<double> zero{0.0}, one{1.0}, four{4.0};
  CHECK(kl_gaussian_diag(one, one, zero, one) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(kl_gaussian_diag(zero, four, zero, one) ==
        doctest::Approx(0.5 * (4.0 - 1.0 - std::log(4.0))).epsilon(1e-12));
  const std::vector<double> mu{0.3, -1.2, 2.0}, var{0.5, 1.7, 3.0};
  CHECK(kl_gaussian_diag(mu, var, mu, var) == 0.0);

  // Tensor form takes log-variances and averages over the batch.
  const Tensor mq({2, 1}, {1.0, 0.0}), lq({2, 1}, {0.0, std::log(4.0)});
  const Tensor mp({2, 1}, {0.0, 0.0}), lp({2, 1}, {0.0, 0.0});
  const double expected = 0.5 * (0.5 + 0.5 * (4.0 - 1.0 - std::log(4.0)));
  CHECK(kl_gaussian_diag(mq, lq, mp, lp).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("kl_categorical_uniform closed-form examples") {
  const std::vector<double> uniform(4, 0.25), one_hot{0.0, 1.0, 0.0, 0.0};
  CHECK(std::abs(kl_categorical_uniform(uniform)) <= 1e-15);
  CHECK(kl_categorical_uniform(one_hot) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor logits = normal_tensor({1, 5}, rng, 2.0);
    const Tensor p = ops::softmax_rows(logits);
    const double from_probs = kl_categorical_uniform(p.data());
    CHECK(from_probs >= 0.0);
    CHECK(kl_categorical_uniform(logits).item() == doctest::Approx(from_probs).epsilon(1e-12));
  }
}

TEST_CASE("closed-form KL terms agree with Monte Carlo within 3 standard errors") {
  const std::size_t samples = 100000;
  Rng rng(5);
  for (int draw = 0; draw < 10; ++draw) {
    const std::size_t d = 3;
    std::vector<double> mq(d), vq(d), mp(d), vp(d);
    for (std::size_t i = 0; i < d; ++i) {
      mq[i] = rng.normal();
      mp[i] = rng.normal();
      vq[i] = std::exp(rng.uniform(-1.0, 1.0));
      vp[i] = std::exp(rng.uniform(-1.0, 1.0));
    }
    std::vector<double> log_ratio(samples);
    for (auto& r : log_ratio) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double z = mq[i] + std::sqrt(vq[i]) * rng.normal();
        const double lq = -0.5 * (std::log(2 * M_PI * vq[i]) + (z - mq[i]) * (z - mq[i]) / vq[i]);
        const double lp = -0.5 * (std::log(2 * M_PI * vp[i]) + (z - mp[i]) * (z - mp[i]) / vp[i]);
        acc += lq - lp;
      }
      r = acc;
    }
    const auto g = mean_se(log_ratio);
    CHECK(std::abs(kl_gaussian_diag(mq, vq, mp, vp) - g.mean) <= 3.0 * g.se);

    const std::size_t k = 4;
    std::vector<double> logits(k);
    for (auto& l : logits) l = 1.5 * rng.normal();
    const Tensor p = ops::softmax_rows(Tensor({1, k}, logits));
    std::vector<double> cat(samples);
    for (auto& r : cat) {
      double u = rng.uniform(), cum = 0.0;
      std::size_t c = 0;
      for (; c + 1 < k; ++c) {
        cum += p.at(c);
        if (u < cum) break;
      }
      r = std::log(k * p.at(c));
    }
    const auto c = mean_se(cat);
    CHECK(std::abs(kl_categorical_uniform(p.data()) - c.mean) <= 3.0 * c.se);
  }
}

TEST_CASE("reconstruction term examples") {
  const std::vector<double> zeros(4, 0.0), ones(4, 1.0);
  CHECK(reconstruction_term(zeros, ones) == -2.0);
  CHECK(reconstruction_term(ones, ones) == 0.0);
  const std::vector<double> x{0.2, 0.9, 0.4}, far{0.8, 0.1, 0.9}, near{0.3, 0.7, 0.5};
  CHECK(reconstruction_term(x, near) > reconstruction_term(x, far));
  CHECK(reconstruction_term(x, far) <= 0.0);
  const Tensor tx({2, 4}, std::vector<double>{0, 0, 0, 0, 1, 1, 1, 1});
  const Tensor tm({2, 4}, std::vector<double>{1, 1, 1, 1, 1, 1, 1, 1});
  CHECK(reconstruction_term(tx, tm).item() == -1.0);
}

TEST_CASE("triplet loss examples") {
  std::size_t single = 0;
  SUBCASE("well separated negative gives zero") {
    const Tensor e({3, 2}, {0, 0, 0, 0, 3, 0});
    const std::vector<int> labels{0, 0, 1};
    // Anchor 2 has no positive and is skipped.
    CHECK(triplet_loss(e, labels, 1.0).item() == 0.0);
  }
  SUBCASE("identical embeddings give the margin") {
    const Tensor e({4, 2}, std::vector<double>(8, 0.5));
    const std::vector<int> labels{0, 0, 1, 1};
    CHECK(triplet_loss(e, labels, 0.7).item() == doctest::Approx(0.7).epsilon(1e-15));
  }
  SUBCASE("hand-computed batch-hard value") {
    // Class 0 at (0,0),(2,0); class 1 at (0,1),(5,5).
    // a0: d_ap 4, d_an 1 -> 4; a1: d_ap 4, d_an min(5, 34) -> 0;
    // a2: d_ap 41, d_an min(1, 5) -> 41; a3: d_ap 41, d_an min(50, 34) -> 8.
    const Tensor e({4, 2}, {0, 0, 2, 0, 0, 1, 5, 5});
    const std::vector<int> labels{0, 0, 1, 1};
    CHECK(triplet_loss(e, labels, 1.0).item() == doctest::Approx((4 + 0 + 41 + 8) / 4.0));
  }
  SUBCASE("single-class batch is zero and counted") {
    const Tensor e({2, 2}, {0, 0, 1, 1});
    const std::vector<int> labels{1, 1};
    CHECK(triplet_loss(e, labels, 1.0, &single).item() == 0.0);
    CHECK(single == 1);
  }
}

TEST_CASE("encode: eval path, determinism and reparameterization") {
  const auto arch = tiny_arch();
  GmvaeModel model(arch, 7);
  Rng rng(8);
  const Tensor y = normal_tensor({3, 2, 8, 8}, rng);

  Rng a(9), b(9);
  const auto e1 = model.encode(y, Mode::eval, a);
  const auto e2 = model.encode(y, Mode::eval, b);
  CHECK(e1.z.data().size() == 12);
  for (std::size_t i = 0; i < e1.z.size(); ++i) {
    CHECK(e1.z.at(i) == e1.mu.at(i));
    CHECK(e1.z.at(i) == e2.z.at(i));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < arch.k; ++j) sum += e1.c_tilde.at(i * arch.k + j);
    CHECK(sum == 1.0);
  }

  Rng c(10), d(10);
  const auto t1 = model.encode(y, Mode::train, c);
  const auto t2 = model.encode(y, Mode::train, d);
  for (std::size_t i = 0; i < t1.z.size(); ++i) CHECK(t1.z.at(i) == t2.z.at(i));

  EncodeNoise noise{normal_tensor({3, arch.k}, rng), normal_tensor({3, arch.latent}, rng)};
  Rng e(11);
  const auto t3 = model.encode(y, Mode::train, e, &noise);
  for (std::size_t i = 0; i < t3.z.size(); ++i) {
    const double expected = t3.mu.at(i) + std::exp(0.5 * t3.logvar.at(i)) * noise.epsilon.at(i);
    CHECK(t3.z.at(i) == doctest::Approx(expected).epsilon(1e-14));
  }
  CHECK_THROWS_AS(model.encode(normal_tensor({3, 2, 4, 4}, rng), Mode::eval, e), ShapeError);
}

TEST_CASE("sampled z matches the encoded mean and variance") {
  GmvaeArchitecture arch;
  arch.side = 4;
  arch.k = 3;
  arch.latent = 2;
  arch.classifier_hidden = 4;
  arch.conv_channels = {2};
  arch.dropout = 0.0;
  GmvaeModel model(arch, 12);
  const std::size_t n = 100000;
  Rng rng(13);
  const Tensor one = normal_tensor({1, 32}, rng);
  std::vector<double> rows;
  rows.reserve(n * 32);
  for (std::size_t i = 0; i < n; ++i) rows.insert(rows.end(), one.data().begin(), one.data().end());
  // Identical rows and a fixed class draw give every row the same posterior.
  EncodeNoise noise{Tensor({n, arch.k}, std::vector<double>(n * arch.k, 0.0)),
                    normal_tensor({n, arch.latent}, rng)};
  const auto enc = model.encode(Tensor({n, 2, 4, 4}, std::move(rows)), Mode::train, rng, &noise);
  for (std::size_t j = 0; j < arch.latent; ++j) {
    const double mu = enc.mu.at(j), var = std::exp(enc.logvar.at(j));
    std::vector<double> z(n), sq(n);
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = enc.z.at(i * arch.latent + j);
      sq[i] = (z[i] - mu) * (z[i] - mu);
    }
    const auto m = mean_se(z);
    const auto v = mean_se(sq);
    CHECK(std::abs(m.mean - mu) <= 3.0 * m.se);
    CHECK(std::abs(v.mean - var) <= 3.0 * v.se);
  }
}

TEST_CASE("total loss assembles its weighted terms") {
  const auto arch = tiny_arch();
  GmvaeModel model(arch, 14);
  Rng rng(15);
  const Tensor y = normal_tensor({4, 2, 8, 8}, rng);
  std::vector<double> xv(4 * 64);
  for (auto& v : xv) v = rng.uniform();
  const Tensor x({4, 64}, xv);
  const std::vector<int> labels{0, 1, 1, 0};
  GmvaeHyper h;
  h.alpha = 1.5;
  h.beta = 3.0;
  h.omega = 0.25;
  h.gamma = 2.0;
  h.label_weight = 0.5;
  Rng r(16);
  const auto out = total_loss(model, y, x, labels, h, h.tau, r);
  const double expected = h.alpha * out.kl_gauss + h.beta * out.kl_cat - h.omega * out.recon +
                          h.gamma * out.triplet + h.label_weight * out.label_nll;
  CHECK(out.loss.item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(out.kl_gauss >= 0.0);
  CHECK(out.kl_cat >= 0.0);
  CHECK(out.recon <= 0.0);
  CHECK(out.triplet >= 0.0);
  CHECK_THROWS_AS(total_loss(model, y, Tensor({3, 64}, std::vector<double>(192)), labels, h,
                             h.tau, r),
                  ShapeError);
}

TEST_CASE("total loss gradient matches finite differences on a 2-sample batch") {
  const auto arch = tiny_arch();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    GmvaeModel model(arch, seed);
    Rng rng(mix_seed(seed, 17));
    const Tensor y = normal_tensor({2, 2, 8, 8}, rng);
    std::vector<double> xv(2 * 64);
    for (auto& v : xv) v = rng.uniform();
    const Tensor x({2, 64}, xv);
    const std::vector<int> labels{0, 1};
    EncodeNoise noise{normal_tensor({2, arch.k}, rng), normal_tensor({2, arch.latent}, rng)};
    GmvaeHyper h;
    const auto res = grad_check(
        [&] {
          Rng r(seed + 1);
          return total_loss(model, y, x, labels, h, h.tau, r, &noise).loss;
        },
        without_shadowed_biases(model.parameters(), model.layers()), 1e-5, 8);
    INFO("worst " << res.worst.parameter << "[" << res.worst.index << "]");
    CHECK(res.max_error <= 1e-4);
  }
}

TEST_CASE("classify: probabilities and shift invariance") {
  const auto arch = tiny_arch();
  GmvaeModel model(arch, 18);
  Rng rng(19);
  const Tensor y = normal_tensor({5, 2, 8, 8}, rng);
  const auto c = classify(model, y);
  REQUIRE(c.predicted.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const double sum = c.probabilities[i * 2] + c.probabilities[i * 2 + 1];
    CHECK(std::abs(sum - 1.0) <= 1e-12);
    CHECK(c.predicted[i] == (c.probabilities[i * 2 + 1] > c.probabilities[i * 2] ? 1 : 0));
  }
  const Tensor logits({2, 3}, {0.1, 2.0, -1.0, 3.0, 3.5, 0.0});
  const Tensor shifted = ops::add_scalar(logits, 123.0);
  const Tensor p1 = ops::softmax_rows(logits), p2 = ops::softmax_rows(shifted);
  for (std::size_t i = 0; i < 6; ++i) CHECK(p1.at(i) == doctest::Approx(p2.at(i)).epsilon(1e-12));

  const Tensor rec = reconstruct(model, y);
  const Tensor rec2 = reconstruct(model, y);
  CHECK(rec.shape() == Shape{5, 64});
  for (std::size_t i = 0; i < rec.size(); ++i) {
    CHECK(rec.at(i) > 0.0);
    CHECK(rec.at(i) < 1.0);
    CHECK(rec.at(i) == rec2.at(i));
  }
}

TEST_CASE("training is deterministic and checkpoints round trip") {
  const auto train = tiny_train_set();
  const auto arch = tiny_arch();
  TrainOptions opt;
  opt.epochs = 2;
  opt.batch = 8;
  opt.seed = 20;
  std::vector<GmvaeEpochLog> seen;
  auto r1 = train_gmvae(train, arch, GmvaeHyper{}, opt, [&](const auto& row) { seen.push_back(row); });
  auto r2 = train_gmvae(train, arch, GmvaeHyper{}, opt);
  CHECK(seen.size() == 2);
  CHECK(r1.log.size() == 2);
  CHECK(encode_checkpoint(r1.model.state()) == encode_checkpoint(r2.model.state()));
  CHECK(format_log_row(r1.log[1]) == format_log_row(r2.log[1]));

  const auto dir = std::filesystem::temp_directory_path() / "bendlens_test_gmvae";
  std::filesystem::create_directories(dir);
  save_gmvae(dir / "m.ckpt", r1.model);
  auto loaded = load_gmvae(dir / "m.ckpt", arch);
  CHECK(encode_checkpoint(loaded.state()) == encode_checkpoint(r1.model.state()));
  const Tensor y = measurement_batch(train, std::vector<std::size_t>{0, 1, 2}, {2, 8});
  CHECK(classify(loaded, y).probabilities == classify(r1.model, y).probabilities);

  write_gmvae_log(dir / "log.csv", r1.log);
  const auto text = read_file(dir / "log.csv");
  const std::string s(text.begin(), text.end());
  CHECK(s.rfind(std::string(kGmvaeLogHeader) + "\n", 0) == 0);

  auto wrong = arch;
  wrong.latent = 5;
  CHECK_THROWS(load_gmvae(dir / "m.ckpt", wrong));
  std::filesystem::remove_all(dir);
}

TEST_CASE("training preconditions") {
  auto train = tiny_train_set();
  const auto arch = tiny_arch();
  TrainOptions opt;
  opt.epochs = 1;
  auto one_config = train;
  std::erase_if(one_config.records, [](const auto& r) { return r.config_id != "C_0"; });
  CHECK_THROWS_AS(train_gmvae(one_config, arch, GmvaeHyper{}, opt), std::invalid_argument);
  auto one_class = train;
  std::erase_if(one_class.records, [](const auto& r) { return r.label != 0; });
  CHECK_THROWS_AS(train_gmvae(one_class, arch, GmvaeHyper{}, opt), std::invalid_argument);
  GmvaeHyper bad;
  bad.omega = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(train_gmvae(train, arch, bad, opt), DivergenceError);
}
