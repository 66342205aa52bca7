#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bendlens/binary_io.hpp"
#include "bendlens/eval.hpp"
#include "bendlens/rng.hpp"

using namespace bendlens;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::size_t count_of(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) {
    ++n;
  }
  return n;
}

EvalReport sample_report() {
  EvalReport r;
  r.experiment = 2;
  r.illumination = "random";
  r.k = 2;
  r.seeds = {{"ensemble", 1}, {"train", 18446744073709551615ull}};
  r.seen_configs = {"C_10", "C_5"};
  r.unseen_configs = {"C_0"};
  r.hashes = {{"gmvae", "00ff"}};
  for (const char* method : {"gmvae", "ae"}) {
    r.psnr.push_back({"C_10", method, "seen", {15.25, 0.1 / 3.0}, 40});
    r.psnr.push_back({"C_5", method, "seen", {14.0, 1.0}, 40});
    r.psnr.push_back({"C_0", method, "unseen", {13.0, 2.0}, 40});
  }
  r.accuracy.push_back({"C_0", "gmvae", "unseen", 0.7, 40});
  MethodSummary s;
  s.seen_psnr = {14.625, 0.625};
  s.unseen_psnr = {13.0, 0.0};
  s.psnr_gap = 1.625;
  s.unseen_confusion = {0.75, 0.25, 0.1, 0.9};
  r.summary["gmvae"] = s;
  r.summary["ae"] = s;
  r.projections.push_back(
      {"latent", {0, 0, 0, 1, 1, 1, 2, 2, 2}, {0, 1, 1}, {"C_10", "C_0", "C_0"}, {0.5, 0.3, 0.2}, 0.25});
  return r;
}

}  // namespace

TEST_CASE("psnr examples and symmetry") {
  const std::vector<double> zeros(16, 0.0), ones(16, 1.0), half(16, 0.5), quarter(16, 0.25);
  CHECK(psnr(half, half) == kPsnrCap);
  CHECK(psnr(zeros, ones) == 0.0);
  CHECK(psnr(half, quarter) == doctest::Approx(10.0 * std::log10(1.0 / 0.0625)).epsilon(1e-14));
  CHECK(psnr(half, quarter) == doctest::Approx(12.0412).epsilon(1e-5));
  Rng rng(1);
  std::vector<double> a(50), b(50);
  for (std::size_t i = 0; i < 50; ++i) {
    a[i] = rng.uniform();
    b[i] = rng.uniform();
  }
  CHECK(psnr(a, b) == psnr(b, a));
  CHECK(psnr(zeros, ones, 2.0) == doctest::Approx(10.0 * std::log10(4.0)));
  CHECK_THROWS_AS(psnr(a, std::vector<double>(3)), std::invalid_argument);
  CHECK_THROWS_AS(psnr(a, b, 0.0), std::invalid_argument);
}

TEST_CASE("confusion matrix identities") {
  const std::vector<int> labels{0, 1, 2, 2, 1, 0, 2};
  const auto perfect = confusion_matrix(labels, labels, 3);
  const auto n = perfect.normalized();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(n[i * 3 + j] == (i == j ? 1.0 : 0.0));
  }
  CHECK(perfect.accuracy() == 1.0);

  const std::vector<int> constant(labels.size(), 1);
  const auto c = confusion_matrix(constant, labels, 3).normalized();
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(c[i * 3 + 1] == 1.0);
    CHECK(c[i * 3] + c[i * 3 + 2] == 0.0);
  }

  const std::vector<int> pred{0, 2, 2, 1, 1, 0, 0};
  const auto m = confusion_matrix(pred, labels, 3);
  CHECK(m.total() == 7);
  CHECK(m.accuracy() == doctest::Approx(4.0 / 7.0));
  const auto mn = m.normalized();
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::abs(mn[i * 3] + mn[i * 3 + 1] + mn[i * 3 + 2] - 1.0) <= 1e-9);
  }
  const auto sparse = confusion_matrix(std::vector<int>{0, 0}, std::vector<int>{0, 0}, 3).normalized();
  CHECK(sparse[3] + sparse[4] + sparse[5] == 0.0);

  const auto avg = average_normalized({perfect, confusion_matrix(constant, labels, 3)});
  CHECK(avg[0] == 0.5);
  CHECK(avg[1] == 0.5);
  CHECK(avg[4] == 1.0);
  CHECK_THROWS_AS(confusion_matrix(std::vector<int>{3}, std::vector<int>{0}, 3), std::out_of_range);
  CHECK_THROWS_AS(confusion_matrix(std::vector<int>{0}, std::vector<int>{-1}, 3), std::out_of_range);
}

TEST_CASE("accuracy statistics") {
  const std::vector<double> one{0.42};
  CHECK(accuracy_stats(one).mean == 0.42);
  CHECK(accuracy_stats(one).std == 0.0);
  const std::vector<double> two{0.7, 0.8};
  CHECK(accuracy_stats(two).mean == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(accuracy_stats(two).std == doctest::Approx(0.05).epsilon(1e-12));
  std::vector<double> many{0.3, 0.9, 0.55, 0.61, 0.12};
  const auto before = accuracy_stats(many);
  std::reverse(many.begin(), many.end());
  std::rotate(many.begin(), many.begin() + 2, many.end());
  const auto after = accuracy_stats(many);
  CHECK(after.mean == doctest::Approx(before.mean).epsilon(1e-15));
  CHECK(after.std == doctest::Approx(before.std).epsilon(1e-15));
  CHECK_THROWS_AS(accuracy_stats(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("jacobi eigendecomposition agrees with a library solver") {
  Rng rng(2);
  for (std::size_t n : {1u, 2u, 5u, 12u, 30u}) {
    Eigen::MatrixXd b(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) b(i, j) = rng.normal();
    }
    const Eigen::MatrixXd a = b * b.transpose() + Eigen::MatrixXd::Identity(n, n) * 0.1;
    std::vector<double> flat(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) flat[i * n + j] = a(i, j);
    }
    const auto eig = jacobi_eigen(flat, n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(a);
    const double scale = oracle.eigenvalues().cwiseAbs().maxCoeff();
    for (std::size_t r = 0; r < n; ++r) {
      CHECK(std::abs(eig.values[r] - oracle.eigenvalues()(n - 1 - r)) <= 1e-9 * scale);
      Eigen::VectorXd v(n);
      std::size_t big = 0;
      for (std::size_t k = 0; k < n; ++k) {
        v(k) = eig.vectors[r * n + k];
        if (std::abs(v(k)) > std::abs(v(big))) big = k;
      }
      CHECK(v(big) > 0.0);
      CHECK(std::abs(v.norm() - 1.0) <= 1e-10);
      CHECK((a * v - eig.values[r] * v).norm() <= 1e-8 * scale);
    }
  }
  CHECK_THROWS_AS(jacobi_eigen({1, 2, 3, 4}, 2), std::invalid_argument);
  CHECK_THROWS_AS(jacobi_eigen({1, 2, 3}, 2), std::invalid_argument);
}

TEST_CASE("pca on collinear, axis-aligned and subspace data") {
  Rng rng(3);
  SUBCASE("collinear points") {
    const std::vector<double> dir{1, -2, 0.5, 3, 0};
    std::vector<double> pts;
    for (int i = 0; i < 40; ++i) {
      const double t = rng.normal();
      for (double d : dir) pts.push_back(1.0 + t * d);
    }
    const auto p = pca_project(pts, 40, 5);
    CHECK(std::abs(p.explained[0] - 1.0) <= 1e-9);
  }
  SUBCASE("orthogonal gaussian cloud") {
    const std::size_t n = 10000;
    const std::vector<double> sd{3.0, 2.0, 1.0};
    std::vector<double> pts;
    std::vector<double> var(3, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < 3; ++a) pts.push_back(sd[a] * rng.normal());
    }
    const auto p = pca_project(pts, n, 3);
    const double total = 9.0 + 4.0 + 1.0;
    for (std::size_t a = 0; a < 3; ++a) {
      CHECK(p.explained[a] == doctest::Approx(sd[a] * sd[a] / total).epsilon(0.02));
    }
    CHECK(p.explained[0] + p.explained[1] + p.explained[2] <= 1.0 + 1e-12);
  }
  SUBCASE("isometry on a 3D subspace, both eigenproblem paths") {
    // Points spanned by three orthonormal directions in D = 8.
    Eigen::MatrixXd basis = Eigen::MatrixXd::Random(8, 3);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(8, 3);
    for (std::size_t n : {6u, 20u}) {
      std::vector<double> pts;
      for (std::size_t i = 0; i < n; ++i) {
        const Eigen::Vector3d c(rng.normal(), rng.normal(), rng.normal());
        const Eigen::VectorXd x = q * c;
        for (int t = 0; t < 8; ++t) pts.push_back(x(t));
      }
      const auto p = pca_project(pts, n, 8);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
          double d_full = 0.0, d_proj = 0.0;
          for (std::size_t t = 0; t < 8; ++t) d_full += std::pow(pts[i * 8 + t] - pts[j * 8 + t], 2);
          for (std::size_t t = 0; t < 3; ++t) {
            d_proj += std::pow(p.projected[i * 3 + t] - p.projected[j * 3 + t], 2);
          }
          CHECK(std::abs(std::sqrt(d_full) - std::sqrt(d_proj)) <= 1e-8);
        }
      }
    }
  }
  SUBCASE("gram and covariance paths give the same axes") {
    const std::size_t n = 9, d = 12;
    std::vector<double> pts(n * d);
    for (auto& v : pts) v = rng.normal();
    const auto gram = pca_project(pts, n, d);
    Eigen::MatrixXd x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < d; ++t) x(i, t) = pts[i * d + t];
    }
    const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / double(n - 1);
    std::vector<double> flat(cov.data(), cov.data() + d * d);
    const auto eig = jacobi_eigen(flat, d);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t t = 0; t < d; ++t) {
        CHECK(std::abs(gram.axes[c * d + t] - eig.vectors[c * d + t]) <= 1e-8);
      }
      CHECK(gram.explained[c] == doctest::Approx(eig.values[c] / cov.trace()).epsilon(1e-10));
    }
  }
  CHECK_THROWS_AS(pca_project(std::vector<double>(10), 5, 2), std::invalid_argument);
  CHECK_THROWS_AS(pca_project(std::vector<double>(8), 2, 4), std::invalid_argument);
}

TEST_CASE("silhouette examples") {
  SUBCASE("hand example") {
    const std::vector<double> pts{0, 1, 4, 5};
    const std::vector<int> labels{0, 0, 1, 1};
    CHECK(silhouette(pts, 4, 1, labels) == doctest::Approx((7.0 / 9.0 + 5.0 / 7.0) / 2.0));
  }
  Rng rng(4);
  SUBCASE("separated tight clusters") {
    std::vector<double> pts;
    std::vector<int> labels;
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 30; ++i) {
        pts.push_back(100.0 * c + 0.1 * rng.normal());
        pts.push_back(-50.0 * c + 0.1 * rng.normal());
        labels.push_back(c);
      }
    }
    const double s = silhouette(pts, 90, 2, labels);
    CHECK(s > 0.9);
    CHECK(s <= 1.0);
  }
  SUBCASE("random labels on one blob") {
    std::vector<double> pts;
    std::vector<int> labels;
    for (int i = 0; i < 500; ++i) {
      for (int t = 0; t < 3; ++t) pts.push_back(rng.normal());
      labels.push_back(static_cast<int>(rng.below(4)));
    }
    const double s = silhouette(pts, 500, 3, labels);
    CHECK(std::abs(s) < 0.1);
    CHECK(s >= -1.0);
  }
  CHECK_THROWS_AS(silhouette(std::vector<double>{0, 1}, 2, 1, std::vector<int>{0, 0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(silhouette(std::vector<double>{0, 1, 2}, 3, 1, std::vector<int>{0, 0, 1}),
                  std::invalid_argument);
}

TEST_CASE("report json round trip and emitted files") {
  const auto r = sample_report();
  CHECK(report_from_json(report_to_json(r)) == r);

  const auto dir = std::filesystem::temp_directory_path() / "bendlens_test_eval";
  std::filesystem::remove_all(dir);
  emit_report(r, dir / "a");
  emit_report(r, dir / "b");
  for (const char* f : {"report.json", "psnr.csv", "confusion_gmvae.csv", "confusion_cae.csv",
                        "pca_latent.csv", "pca_latent.svg"}) {
    INFO(f);
    REQUIRE(std::filesystem::exists(dir / "a" / f));
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
  const auto psnr_csv = slurp(dir / "a" / "psnr.csv");
  CHECK(count_of(psnr_csv, "\n") == 1 + 3 * 2);
  CHECK(psnr_csv.find("C_10,gmvae,15.25,0.033333333333333333") != std::string::npos);

  const auto svg = slurp(dir / "a" / "pca_latent.svg");
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(count_of(svg, "<circle") + count_of(svg, "<rect") == 3);
  CHECK(count_of(svg, "<svg") == 1);
  CHECK(count_of(svg, "</svg>") == 1);
  CHECK(count_of(svg, "/>") == 3);

  const auto pca_csv = slurp(dir / "a" / "pca_latent.csv");
  CHECK(pca_csv.rfind("x,y,z,label,config\n", 0) == 0);
  CHECK(count_of(pca_csv, "\n") == 4);

  write_text_file(dir / "blocker", "x");
  CHECK_THROWS(emit_report(r, dir / "blocker" / "sub"));
  std::filesystem::remove_all(dir);
}
