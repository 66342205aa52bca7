// Acceptance suite: one PASS/FAIL line per criterion, indented detail lines
// below it. Exit status 0 only when every selected criterion passes.

#include <algorithm>
#include <cfloat>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bendlens/binary_io.hpp"
#include "bendlens/checkpoint.hpp"
#include "bendlens/experiment.hpp"
#include "bendlens/gradsuite.hpp"
#include "bendlens/layers.hpp"
#include "bendlens/ops.hpp"

using namespace bendlens;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  static std::string format(const char* fmt, auto... args) {
    char buf[512];
    if constexpr (sizeof...(args) == 0) {
      std::snprintf(buf, sizeof buf, "%s", fmt);
    } else {
      std::snprintf(buf, sizeof buf, fmt, args...);
    }
    return buf;
  }
  void note(const char* fmt, auto... args) { details.push_back(format(fmt, args...)); }
  // Records the check and returns its result.
  bool check(bool ok, const char* fmt, auto... args) {
    const auto buf = format(fmt, args...);
    details.push_back(std::string(ok ? "ok   " : "FAIL ") + buf);
    pass = pass && ok;
    return ok;
  }
};

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome gradient_suite() {
  Outcome o;
  GradSuiteOptions options;
  const auto t0 = Clock::now();
  const auto rows = run_gradient_suite(options);
  const double secs = seconds_since(t0);
  for (const auto& r : rows) {
    o.check(r.pass, "%-22s max rel err %.3e over %zu seeds (%zu entries)", r.name.c_str(),
            r.max_error, r.seeds, r.checked);
  }
  o.check(options.seeds >= 20, "seeds per row: %zu", options.seeds);
  o.check(secs < 120.0, "runtime %.1f s (limit 120 s)", secs);
  return o;
}

// ---------------------------------------------------------------------------
// 2. Closed-form KL vs Monte Carlo

struct MeanSe {
  double mean;
  double se;
};

MeanSe mean_se(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1.0) / n)};
}

Outcome kl_monte_carlo() {
  Outcome o;
  const std::size_t samples = 100000;
  Rng rng(2024);
  for (int draw = 0; draw < 10; ++draw) {
    const std::size_t d = 4;
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
        acc += -0.5 * (std::log(vq[i]) + (z - mq[i]) * (z - mq[i]) / vq[i]) +
               0.5 * (std::log(vp[i]) + (z - mp[i]) * (z - mp[i]) / vp[i]);
      }
      r = acc;
    }
    const auto g = mean_se(log_ratio);
    const double closed_g = kl_gaussian_diag(mq, vq, mp, vp);
    o.check(std::abs(closed_g - g.mean) <= 3.0 * g.se,
            "draw %d gaussian: closed %.6f, MC %.6f +- %.6f (%.2f SE)", draw, closed_g, g.mean, g.se,
            std::abs(closed_g - g.mean) / g.se);

    const std::size_t k = 5;
    std::vector<double> logits(k);
    for (auto& l : logits) l = 1.5 * rng.normal();
    const Tensor p = ops::softmax_rows(Tensor({1, k}, logits));
    std::vector<double> cat(samples);
    for (auto& r : cat) {
      const double u = rng.uniform();
      double cum = 0.0;
      std::size_t c = 0;
      for (; c + 1 < k; ++c) {
        cum += p.at(c);
        if (u < cum) break;
      }
      r = std::log(static_cast<double>(k) * p.at(c));
    }
    const auto c = mean_se(cat);
    const double closed_c = kl_categorical_uniform(p.data());
    o.check(std::abs(closed_c - c.mean) <= 3.0 * c.se,
            "draw %d categorical: closed %.6f, MC %.6f +- %.6f (%.2f SE)", draw, closed_c, c.mean,
            c.se, std::abs(closed_c - c.mean) / c.se);
  }
  return o;
}

// ---------------------------------------------------------------------------
// 3. Forward model exactness

Outcome forward_model() {
  Outcome o;
  Matrix eye(2, 2);
  eye(0, 0) = eye(1, 1) = 1.0;
  o.check(forward_measure(eye, std::vector<double>{1.0, 0.0}, 0.0).values ==
              std::vector<double>{1.0, 0.0},
          "A = I2, x = (1, 0), noise 0 -> (1, 0)");
  o.check(forward_measure(eye, std::vector<double>{0.0, 0.0}).values == std::vector<double>{0.0, 0.0},
          "x = 0 -> y = 0 before noise");
  o.check(forward_measure(eye, std::vector<double>{1.0, 0.0}).noise_std == 0.015,
          "default noise std 0.015");
  const auto y = apply_normalization(std::vector<double>{2.0, 4.0}, 2.0, std::vector<double>{1.0, 1.0},
                                     std::vector<double>{0.0, 0.0});
  o.check(y.values == std::vector<double>{0.0, 1.0, 0.0, 1.0} && !y.degenerate,
          "Ax = (2, 4), s = 2, w = 1, b = 0 -> channels (0, 1), (0, 1)");
  const auto flat = apply_normalization(std::vector<double>{3.0, 3.0, 3.0}, 10.0,
                                        std::vector<double>{1.0, 1.0, 1.0},
                                        std::vector<double>{0.0, 0.0, 0.0});
  o.check(flat.degenerate && std::all_of(flat.values.begin(), flat.values.end(),
                                         [](double v) { return v == 0.0; }),
          "constant Ax -> zero channels, degenerate flag");

  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SpeckleGenerator gen(64, 256, IlluminationMode::random, 2.0 / M_PI, seed);
    const auto a = gen.matrix(0.37);
    Rng rng(seed + 10);
    std::vector<double> x1(256), x2(256), mix(256);
    const double alpha = rng.uniform();
    for (std::size_t i = 0; i < 256; ++i) {
      x1[i] = rng.uniform();
      x2[i] = rng.uniform();
      mix[i] = alpha * x1[i] + (1 - alpha) * x2[i];
    }
    const auto y1 = forward_measure(a, x1, 0.0).values;
    const auto y2 = forward_measure(a, x2, 0.0).values;
    const auto ym = forward_measure(a, mix, 0.0).values;
    const double scale = *std::max_element(ym.begin(), ym.end());
    for (std::size_t i = 0; i < ym.size(); ++i) {
      worst = std::max(worst, std::abs(ym[i] - (alpha * y1[i] + (1 - alpha) * y2[i])) / scale);
    }
  }
  o.check(worst <= 64 * DBL_EPSILON, "linearity: max relative deviation %.2e (limit 64 eps = %.2e)",
          worst, 64 * DBL_EPSILON);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Decorrelation

Outcome decorrelation() {
  Outcome o;
  const auto grid = make_config_grid(11);
  for (auto mode : {IlluminationMode::random, IlluminationMode::wavefront_shaped}) {
    double worst_rise = -1.0, worst_end = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      SpeckleGenerator gen(64, 256, mode, 2.0 / M_PI, seed);
      const auto a0 = gen.matrix(0.0);
      double prev = 1.0;
      for (const auto& c : grid) {
        const double r = speckle_correlation(a0, gen.matrix(c.bend));
        worst_rise = std::max(worst_rise, r - prev);
        prev = r;
      }
      worst_end = std::max(worst_end, prev);
    }
    const auto name = std::string(to_string(mode));
    o.check(worst_rise <= 0.02, "%s: largest step increase of corr(A(0), A(t)) %.4f (limit 0.02)",
            name.c_str(), worst_rise);
    o.check(worst_end < 0.5, "%s: largest corr(A(0), A(1)) over 5 seeds %.4f (limit < 0.5)",
            name.c_str(), worst_end);
  }
  return o;
}

// ---------------------------------------------------------------------------
// 5. Wavefront-shaping signature

Outcome wavefront_signature() {
  Outcome o;
  const std::size_t side = 16, n = side * side;
  const auto images = gen_shapes(20, kShapeClassCount, side, 5);
  SpeckleGenerator gen(n, n, IlluminationMode::wavefront_shaped, 2.0 / M_PI, 3);
  double sum0 = 0.0, sum1 = 0.0;
  for (double t : {0.0, 1.0}) {
    const auto a = gen.matrix(t);
    const auto bg = simulate_backgrounds(a);
    for (std::size_t i = 0; i < images.count(); ++i) {
      const auto ax = forward_measure(a, images.image(i), 0.0).values;
      const auto y = apply_normalization(ax, kDampingExperiment1, bg.white, bg.black);
      // Channel 1 reshaped onto the raster grid: spot i sits at pixel i when M = N.
      const std::span<const double> channel1(y.values.data(), n);
      (t == 0.0 ? sum0 : sum1) += psnr(images.image(i), channel1);
    }
  }
  const double p0 = sum0 / 20.0, p1 = sum1 / 20.0;
  o.note("mean PSNR of reshaped channel 1: t = 0 %.2f dB, t = 1 %.2f dB", p0, p1);
  o.check(p0 - p1 >= 6.0, "advantage %.2f dB (limit >= 6 dB)", p0 - p1);
  return o;
}

// ---------------------------------------------------------------------------
// 6-8. Desk-scale pipeline runs

class Runs {
 public:
  Runs(ExperimentConfig config, std::filesystem::path work, bool verbose)
      : config_(std::move(config)), work_(std::move(work)), verbose_(verbose) {}

  const ExperimentConfig& config() const { return config_; }

  // Experiment-1 report for `seed`; the seed-1 run comes from the first demo
  // when it has been run.
  const EvalReport& experiment1(std::uint64_t seed) {
    if (auto it = reports_.find(seed); it != reports_.end()) return it->second;
    const auto c = for_experiment(with_seed(config_, seed), 1);
    const RunLayout run{work_ / ("seed" + std::to_string(seed))};
    std::filesystem::remove_all(run.root);
    const auto t0 = Clock::now();
    run_simulate(c, run, progress());
    run_synth(c, run, progress());
    for (auto m : {ModelKind::gmvae, ModelKind::ae, ModelKind::cae}) run_train(c, run, m, progress());
    reports_[seed] = run_eval(c, run, progress());
    std::printf("  [seed %llu experiment 1 pipeline: %.1f s]\n",
                static_cast<unsigned long long>(seed), seconds_since(t0));
    std::fflush(stdout);
    return reports_[seed];
  }

  // Runs the full demo into work/<name>; returns wall seconds.
  double demo(const std::string& name) {
    const auto root = work_ / name;
    std::filesystem::remove_all(root);
    const auto t0 = Clock::now();
    const auto result = run_demo(config_, root, progress());
    const double secs = seconds_since(t0);
    const auto seed = config_.gmvae.train.seed;
    if (config_.ensemble.seed == seed && config_.data.seed == seed && config_.ae.seed == seed &&
        reports_.count(seed) == 0) {
      reports_[seed] = result.experiment1;
    }
    return secs;
  }

  std::filesystem::path path(const std::string& name) const { return work_ / name; }

 private:
  Progress progress() const {
    if (!verbose_) return {};
    return [](const std::string& line) {
      std::printf("    %s\n", line.c_str());
      std::fflush(stdout);
    };
  }

  ExperimentConfig config_;
  std::filesystem::path work_;
  bool verbose_;
  std::map<std::uint64_t, EvalReport> reports_;
};

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

Outcome generalization(Runs& runs) {
  Outcome o;
  const double chance = 1.0 / static_cast<double>(runs.config().data.classes);
  for (auto seed : kSeeds) {
    const auto& r = runs.experiment1(seed);
    const auto& g = r.summary.at("gmvae");
    const auto& a = r.summary.at("ae");
    o.note("seed %llu: gmvae unseen acc %.3f +- %.3f, c-ae %.3f | unseen PSNR gmvae %.2f, ae %.2f dB "
           "| gap gmvae %.2f, ae %.2f dB",
           static_cast<unsigned long long>(seed), g.unseen_accuracy.mean, g.unseen_accuracy.std,
           a.unseen_accuracy.mean, g.unseen_psnr.mean, a.unseen_psnr.mean, g.psnr_gap, a.psnr_gap);
    o.check(g.unseen_accuracy.mean >= 2.0 * chance, "seed %llu: gmvae unseen accuracy %.3f >= %.3f",
            static_cast<unsigned long long>(seed), g.unseen_accuracy.mean, 2.0 * chance);
    o.check(g.unseen_psnr.mean >= a.unseen_psnr.mean,
            "seed %llu: gmvae unseen PSNR %.3f >= ae %.3f dB", static_cast<unsigned long long>(seed),
            g.unseen_psnr.mean, a.unseen_psnr.mean);
    o.check(g.psnr_gap <= a.psnr_gap, "seed %llu: gmvae seen-unseen gap %.3f <= ae %.3f dB",
            static_cast<unsigned long long>(seed), g.psnr_gap, a.psnr_gap);
  }
  return o;
}

Outcome latent_clustering(Runs& runs) {
  Outcome o;
  for (auto seed : kSeeds) {
    const auto& r = runs.experiment1(seed);
    double raw = 0.0, latent = 0.0;
    std::set<std::string> configs;
    for (const auto& p : r.projections) {
      (p.which == "raw" ? raw : latent) = p.silhouette;
      configs.insert(p.configs.begin(), p.configs.end());
    }
    std::string pooled;
    for (const auto& c : configs) pooled += (pooled.empty() ? "" : ",") + c;
    o.check(latent > raw, "seed %llu: silhouette latent %.4f > raw %.4f (pooled over %s)",
            static_cast<unsigned long long>(seed), latent, raw, pooled.c_str());
  }
  return o;
}

Outcome determinism(Runs& runs) {
  Outcome o;
  const double t1 = runs.demo("demoA");
  const double t2 = runs.demo("demoB");
  const auto m1 = read_file(runs.path("demoA") / "manifest.json");
  const auto m2 = read_file(runs.path("demoB") / "manifest.json");
  o.check(m1 == m2, "demo manifests byte-identical (%zu bytes, fnv1a %s)", m1.size(),
          hex64(fnv1a64(m1)).c_str());
  o.check(std::max(t1, t2) < 1800.0, "demo wall time %.1f s and %.1f s (limit 1800 s)", t1, t2);
  return o;
}

// ---------------------------------------------------------------------------
// 9. Format robustness

template <class Decode>
bool rejects(Decode decode, std::vector<std::uint8_t> bytes, FormatErrorKind kind) {
  try {
    decode(bytes);
  } catch (const FormatError& e) {
    return e.kind() == kind && std::string(e.what()).rfind(std::string(diagnostic(kind)), 0) == 0;
  }
  return false;
}

std::vector<std::uint8_t> be32(std::vector<std::uint8_t> b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
  return b;
}

Outcome formats() {
  Outcome o;
  const auto dir = std::filesystem::temp_directory_path() / "bendlens_acceptance_formats";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  // IDX
  auto images = be32(be32(be32(be32({}, 0x803), 3), 28), 28);
  for (std::size_t i = 0; i < 3 * 28 * 28; ++i) images.push_back(static_cast<std::uint8_t>(i * 37));
  const auto labels = [](std::uint32_t magic, std::vector<std::uint8_t> l) {
    auto b = be32(be32({}, magic), static_cast<std::uint32_t>(l.size()));
    b.insert(b.end(), l.begin(), l.end());
    return b;
  };
  const auto good_labels = labels(0x801, {0, 1, 2});
  const auto idx_with = [&](const std::vector<std::uint8_t>& lbl) {
    return [&, lbl](const std::vector<std::uint8_t>& img) { decode_idx(img, lbl, {.side = 32}); };
  };
  auto bad = images;
  bad[3] = 0x02;
  o.check(rejects(idx_with(good_labels), bad, FormatErrorKind::bad_magic), "IDX: magic 0x802 -> bad magic");
  o.check(rejects(idx_with(good_labels), {images.begin(), images.end() - 5},
                  FormatErrorKind::unexpected_eof),
          "IDX: truncated pixels -> unexpected EOF");
  o.check(rejects(idx_with(labels(0x801, {0, 1})), images, FormatErrorKind::count_mismatch),
          "IDX: 2 labels for 3 images -> count mismatch");
  // 28 x 28 centred in 32 x 32 with a two-pixel border.
  const auto set = decode_idx(images, good_labels, {.side = 32});
  bool scaled = set.count() == 3;
  for (std::size_t i = 0; scaled && i < 3 * 28 * 28; ++i) {
    const std::size_t img = i / 784, r = i % 784 / 28, c = i % 28;
    scaled = set.image(img)[(r + 2) * 32 + c + 2] == static_cast<double>(images[16 + i]) / 255.0;
  }
  o.check(scaled, "IDX: decoded pixels equal raw bytes / 255");

  // SPKL
  const auto ens = gen_speckle_ensemble(8, 16, make_config_grid(3), IlluminationMode::random, 1.0, 4);
  const auto spkl = encode_ensemble(ens);
  save_ensemble(dir / "e.spkl", ens);
  const auto e_back = load_ensemble(dir / "e.spkl");
  o.check(read_file(dir / "e.spkl") == spkl && encode_ensemble(e_back) == spkl,
          "SPKL: save/load/encode round trip byte-exact");
  const auto dec_e = [](const std::vector<std::uint8_t>& b) { decode_ensemble(b); };
  auto spkl_magic = spkl;
  spkl_magic[0] ^= 0xff;
  auto spkl_version = spkl;
  spkl_version[4] = 7;
  o.check(rejects(dec_e, spkl_magic, FormatErrorKind::bad_magic) &&
              rejects(dec_e, {spkl.begin(), spkl.end() - 1}, FormatErrorKind::unexpected_eof) &&
              rejects(dec_e, spkl_version, FormatErrorKind::unsupported_version),
          "SPKL: bad magic, truncation, version rejected with their diagnostics");

  // MSDT
  const std::vector<std::string> ids{"C_10", "C_0"};
  const auto ens8 = gen_speckle_ensemble(8, 64, make_config_grid(3), IlluminationMode::random, 1.0, 4);
  const auto ds = synthesize_measurements(gen_shapes(4, 2, 8, 1), ens8, ids);
  const auto msdt = encode_dataset(ds);
  save_dataset(dir / "d.msdt", ds);
  o.check(read_file(dir / "d.msdt") == msdt && encode_dataset(load_dataset(dir / "d.msdt")) == msdt,
          "MSDT: save/load/encode round trip byte-exact");
  const auto dec_d = [](const std::vector<std::uint8_t>& b) { decode_dataset(b); };
  auto msdt_magic = msdt;
  msdt_magic[2] = 'Z';
  auto msdt_version = msdt;
  msdt_version[4] = 3;
  o.check(rejects(dec_d, msdt_magic, FormatErrorKind::bad_magic) &&
              rejects(dec_d, {msdt.begin(), msdt.end() - 9}, FormatErrorKind::unexpected_eof) &&
              rejects(dec_d, msdt_version, FormatErrorKind::unsupported_version),
          "MSDT: bad magic, truncation, version rejected with their diagnostics");

  // Checkpoint
  GmvaeArchitecture arch;
  arch.side = 8;
  arch.k = 2;
  arch.latent = 3;
  arch.classifier_hidden = 4;
  arch.conv_channels = {2};
  const GmvaeModel model(arch, 9);
  save_gmvae(dir / "m.ckpt", model);
  const auto ckpt = read_file(dir / "m.ckpt");
  save_gmvae(dir / "m2.ckpt", load_gmvae(dir / "m.ckpt", arch));
  o.check(read_file(dir / "m2.ckpt") == ckpt && encode_checkpoint(model.state()) == ckpt,
          "checkpoint: save/load round trip byte-exact");
  const auto dec_c = [](const std::vector<std::uint8_t>& b) { decode_checkpoint(b); };
  auto ck_magic = ckpt;
  ck_magic[1] = '?';
  auto ck_version = ckpt;
  ck_version[4] = 2;
  o.check(rejects(dec_c, ck_magic, FormatErrorKind::bad_magic) &&
              rejects(dec_c, {ckpt.begin(), ckpt.end() - 2}, FormatErrorKind::unexpected_eof) &&
              rejects(dec_c, ck_version, FormatErrorKind::unsupported_version),
          "checkpoint: bad magic, truncation, version rejected with their diagnostics");
  std::filesystem::remove_all(dir);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-9"};
  std::string config_path = std::string(BENDLENS_SOURCE_DIR) + "/configs/desk.json";
  std::string work = "acceptance_runs";
  std::vector<int> only;
  bool verbose = false;
  app.add_option("--config", config_path, "Desk config")->capture_default_str();
  app.add_option("--work", work, "Directory for pipeline runs")->capture_default_str();
  app.add_option("--criteria", only, "Run only these criteria (default: all)")
      ->delimiter(',')
      ->check(CLI::Range(1, 9));
  app.add_flag("--verbose", verbose, "Print pipeline progress");
  CLI11_PARSE(app, argc, argv);

  const auto config = load_config(config_path);
  Runs runs(config, std::filesystem::absolute(work), verbose);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"closed-form KL vs Monte Carlo", kl_monte_carlo},
      {"forward-model exactness", forward_model},
      {"speckle decorrelation", decorrelation},
      {"wavefront-shaping signature", wavefront_signature},
      {"desk-scale generalization (3 seeds)", [&] { return generalization(runs); }},
      {"latent clustering (3 seeds)", [&] { return latent_clustering(runs); }},
      {"determinism and demo wall time", [&] { return determinism(runs); }},
      {"format robustness", formats},
  };
  // Criterion 8 first among the pipeline criteria so its seed-1 demo is
  // reused by 6 and 7.
  std::vector<int> order{1, 2, 3, 4, 5, 9, 8, 6, 7};
  if (!only.empty()) {
    std::erase_if(order, [&](int c) { return std::find(only.begin(), only.end(), c) == only.end(); });
  }

  std::map<int, bool> verdicts;
  for (int id : order) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[id - 1].second();
    } catch (const std::exception& e) {
      o.check(false, "exception: %s", e.what());
    }
    verdicts[id] = o.pass;
    std::printf("criterion %d: %s  %s  (%.1f s)\n", id, o.pass ? "PASS" : "FAIL",
                criteria[id - 1].first.c_str(), seconds_since(t0));
    for (const auto& d : o.details) std::printf("    %s\n", d.c_str());
    std::fflush(stdout);
  }
  std::size_t passed = 0;
  for (const auto& [id, ok] : verdicts) passed += ok ? 1 : 0;
  std::printf("summary: %zu/%zu criteria passed\n", passed, verdicts.size());
  return passed == verdicts.size() ? 0 : 1;
}
