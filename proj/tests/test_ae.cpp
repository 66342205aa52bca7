#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "bendlens/ae.hpp"
#include "bendlens/checkpoint.hpp"
#include "bendlens/fiber.hpp"
#include "bendlens/gradsuite.hpp"

using namespace bendlens;

namespace {

AeArchitecture small_ae() {
  AeArchitecture a;
  a.side = 8;
  a.block_channels = {2, 4};
  return a;
}

CaeArchitecture small_cae() {
  CaeArchitecture a;
  a.side = 8;
  a.k = 2;
  a.conv_channels = {2, 4};
  a.hidden = 8;
  return a;
}

MeasurementDataset small_train_set() {
  const auto grid = make_config_grid(3);
  const auto ens = gen_speckle_ensemble(64, 64, grid, IlluminationMode::random, 2.0 / M_PI, 4);
  const std::vector<std::string> ids{grid.front().id, grid.back().id};
  return synthesize_measurements(gen_shapes(24, 2, 8, 6), ens, ids);
}

}  // namespace

TEST_CASE("ae has no dense layer between encoder and decoder") {
  AeModel model(AeArchitecture{}, 1);
  std::size_t convs = 0;
  for (const Layer* l : model.layers()) {
    CHECK(l->spec().kind != LayerKind::dense);
    if (l->spec().kind == LayerKind::conv2d) ++convs;
  }
  // Three encoder and three decoder blocks of two convs, plus the 1x1 head.
  CHECK(convs == 13);
  for (const auto& p : model.parameters()) CHECK(p.tensor.rank() != 2);
}

TEST_CASE("ae output shape, range and determinism") {
  AeModel model(AeArchitecture{}, 2);
  Rng rng(3);
  std::vector<double> v(3 * 2 * 16 * 16);
  for (auto& x : v) x = rng.normal();
  const Tensor y({3, 2, 16, 16}, v);
  const Tensor a = ae_reconstruct(model, y);
  const Tensor b = ae_reconstruct(model, y);
  CHECK(a.shape() == Shape{3, 256});
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.at(i) > 0.0);
    CHECK(a.at(i) < 1.0);
    CHECK(a.at(i) == b.at(i));
  }
  CHECK_THROWS_AS(ae_reconstruct(model, Tensor({1, 2, 8, 8}, std::vector<double>(128))),
                  ShapeError);
  AeArchitecture bad;
  bad.side = 6;
  CHECK_THROWS_AS(AeModel(bad, 0), std::invalid_argument);
}

TEST_CASE("ae and c-ae blocks pass the gradient suite entries") {
  GradSuiteOptions opt;
  opt.seeds = 5;
  for (const auto& row : run_gradient_suite(opt)) {
    if (row.name == "objective:ae" || row.name == "objective:cae" ||
        row.name == "op:upsample_nearest" || row.name == "layer:maxpool2d") {
      INFO(row.name << " " << row.max_error);
      CHECK(row.pass);
    }
  }
}

TEST_CASE("train_ae is deterministic and reduces loss") {
  const auto train = small_train_set();
  TrainOptions opt;
  opt.epochs = 4;
  opt.batch = 8;
  opt.seed = 7;
  opt.learning_rate = 3e-3;
  auto r1 = train_ae(train, small_ae(), opt);
  auto r2 = train_ae(train, small_ae(), opt);
  REQUIRE(r1.log.size() == 4);
  CHECK(encode_checkpoint(r1.model.state()) == encode_checkpoint(r2.model.state()));
  CHECK(r1.log.back().loss < r1.log.front().loss);

  const auto dir = std::filesystem::temp_directory_path() / "bendlens_test_ae";
  std::filesystem::create_directories(dir);
  save_ae(dir / "ae.ckpt", r1.model);
  auto loaded = load_ae(dir / "ae.ckpt", small_ae());
  CHECK(encode_checkpoint(loaded.state()) == encode_checkpoint(r1.model.state()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("c-ae requires an ae and classifies into 0..k-1") {
  const auto train = small_train_set();
  TrainOptions opt;
  opt.epochs = 2;
  opt.batch = 8;
  opt.seed = 8;
  CHECK_THROWS_AS(train_cae(nullptr, train, small_cae(), opt), std::invalid_argument);

  auto ae = train_ae(train, small_ae(), opt);
  auto c1 = train_cae(&ae.model, train, small_cae(), opt);
  auto c2 = train_cae(&ae.model, train, small_cae(), opt);
  CHECK(encode_checkpoint(c1.model.state()) == encode_checkpoint(c2.model.state()));
  CHECK(c1.log.size() == 2);

  const Tensor y = measurement_batch(train, std::vector<std::size_t>{0, 1, 2, 3}, {2, 8});
  const auto cls = cae_classify(ae.model, c1.model, y);
  REQUIRE(cls.predicted.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(cls.predicted[i] >= 0);
    CHECK(cls.predicted[i] < 2);
    CHECK(cls.probabilities[2 * i] + cls.probabilities[2 * i + 1] == doctest::Approx(1.0));
  }
}
