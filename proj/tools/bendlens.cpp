// bendlens: end-to-end experiment driver.
//
// Exit codes: 0 success, 1 validation error (bad flags, config schema
// violation, missing prerequisite, corrupt input file), 2 runtime failure
// (divergence, failed gradient check, I/O).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "bendlens/binary_io.hpp"
#include "bendlens/experiment.hpp"
#include "bendlens/gradsuite.hpp"

using namespace bendlens;

namespace {

struct Flags {
  std::string config = "configs/desk.json";
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> experiment;
  std::string model;
  bool quiet = false;
};

ExperimentConfig resolve(const Flags& f) {
  auto c = load_config(f.config);
  if (f.experiment) c = for_experiment(c, *f.experiment);
  if (f.seed) c = with_seed(c, *f.seed);
  return c;
}

std::filesystem::path out_dir(const Flags& f, const ExperimentConfig& c) {
  return f.out.empty() ? std::filesystem::path(c.eval.out_dir) : std::filesystem::path(f.out);
}

int run(const std::string& command, const Flags& f) {
  const Progress progress = f.quiet ? Progress() : Progress([](const std::string& line) {
    std::cout << line << '\n' << std::flush;
  });
  if (command == "gradcheck") {
    const GradSuiteOptions options;
    const auto t0 = std::chrono::steady_clock::now();
    const auto rows = run_gradient_suite(options);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << format_gradient_table(rows, options.tolerance);
    if (!f.quiet) std::printf("runtime: %.1f s\n", seconds);
    for (const auto& r : rows) {
      if (!r.pass) return 2;
    }
    return 0;
  }

  const auto config = resolve(f);
  const auto root = out_dir(f, config);
  const RunLayout run{root};
  if (command == "simulate") {
    run_simulate(config, run, progress);
  } else if (command == "synth-data") {
    run_synth(config, run, progress);
  } else if (command == "train") {
    run_train(config, run, parse_model_kind(f.model), progress);
  } else if (command == "eval") {
    run_eval(config, run, progress);
    if (!f.quiet) std::cout << "report: " << run.report().string() << '\n';
  } else if (command == "demo") {
    const auto t0 = std::chrono::steady_clock::now();
    run_demo(config, root, progress);
    if (!f.quiet) {
      std::printf("demo: wall time %.1f s, manifest %s\n",
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                  (root / "manifest.json").string().c_str());
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bend-resistant fiber imaging experiments: simulate, synthesize, train, evaluate"};
  app.require_subcommand(1, 1);
  Flags f;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "Experiment config (JSON)")->capture_default_str();
    sub->add_option("--out", f.out, "Run directory (default: eval.out_dir of the config)");
    sub->add_option("--seed", f.seed, "Override every section seed");
    sub->add_option("--experiment", f.experiment,
                    "1: wavefront-shaped, s = 10; 2: random illumination, s = 200")
        ->check(CLI::IsMember({1, 2}));
    sub->add_flag("--quiet", f.quiet, "Suppress progress output");
  };
  add_common(app.add_subcommand("simulate", "Generate the speckle ensemble"));
  add_common(app.add_subcommand("synth-data", "Synthesize train and test measurement datasets"));
  auto* train = app.add_subcommand("train", "Train one model and write its checkpoint and log");
  add_common(train);
  train->add_option("--model", f.model, "gmvae, ae or cae (cae needs a trained ae)")
      ->required()
      ->check(CLI::IsMember({"gmvae", "ae", "cae"}));
  add_common(app.add_subcommand("eval", "Evaluate trained models and emit the report"));
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  grad->add_flag("--quiet", f.quiet, "Print only the table");
  add_common(app.add_subcommand("demo", "Every stage for experiments 1 and 2"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    thread_cap(std::getenv("BENDLENS_THREADS"));
    return run(app.get_subcommands().front()->get_name(), f);
  } catch (const ConfigError& e) {
    std::cerr << "config error at " << e.what() << '\n';
    return 1;
  } catch (const PrerequisiteError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
