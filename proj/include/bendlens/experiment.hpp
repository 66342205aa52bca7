#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bendlens/ae.hpp"
#include "bendlens/dataset.hpp"
#include "bendlens/eval.hpp"
#include "bendlens/fiber.hpp"
#include "bendlens/gmvae.hpp"

namespace bendlens {

/// Schema or value error in a configuration document. `pointer()` is the
/// JSON pointer of the offending value.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string pointer, const std::string& message);
  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

/// A required input file is absent or belongs to a different configuration.
class PrerequisiteError : public std::runtime_error {
 public:
  PrerequisiteError(std::filesystem::path path, const std::string& message);
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

struct EnsembleSection {
  std::size_t patterns = 256;  // M
  std::size_t side = 16;       // N = side^2
  std::size_t configs = 11;    // L, grid points C_10 ... C_0
  IlluminationMode mode = IlluminationMode::wavefront_shaped;
  double decorrelation_scale = 2.0 / 3.141592653589793;
  std::uint64_t seed = 1;
};

struct DataSection {
  ImageSource source = ImageSource::synthetic_shapes;
  std::string idx_images;
  std::string idx_labels;
  std::size_t classes = 4;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;
  double noise_std = kDefaultNoiseStd;
  double s = kDampingExperiment1;
  std::vector<std::string> train_configs;
  std::vector<std::string> unseen_configs;
  std::uint64_t seed = 1;
};

struct GmvaeSection {
  GmvaeHyper hyper;
  std::size_t d = 64;
  std::size_t hidden = 128;  // classifier width, shared with the C-AE
  TrainOptions train;
};

struct EvalSection {
  std::string out_dir = "runs/desk";
  std::vector<std::string> projection_configs;
  std::size_t projection_per_config = 200;
};

struct ExperimentConfig {
  EnsembleSection ensemble;
  DataSection data;
  NormalizationChannels channels = NormalizationChannels::both;
  GmvaeSection gmvae;
  TrainOptions ae;
  EvalSection eval;

  GmvaeArchitecture gmvae_architecture() const;
  AeArchitecture ae_architecture() const;
  CaeArchitecture cae_architecture() const;
};

/// Strict parse: unknown keys, missing keys, wrong types and out-of-range
/// values all raise ConfigError.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical JSON (sorted keys, two-space indent) of the resolved document.
std::string config_to_json(const ExperimentConfig& config);
std::uint64_t config_hash(const ExperimentConfig& config);

/// Experiment 1 is wavefront-shaped illumination with s = 10, experiment 2
/// random illumination with s = 200. Nothing else changes.
ExperimentConfig for_experiment(ExperimentConfig config, int experiment);
/// 1 for wavefront-shaped illumination, 2 for random.
int experiment_of(const ExperimentConfig& config);

/// Overrides every section seed.
ExperimentConfig with_seed(ExperimentConfig config, std::uint64_t seed);

/// JSON pointers of the leaves where the two documents differ; arrays are
/// compared as whole values.
std::vector<std::string> config_diff(const ExperimentConfig& a, const ExperimentConfig& b);

/// Parses BENDLENS_THREADS. Unset means 1; anything but a positive integer
/// raises ConfigError.
std::size_t thread_cap(const char* env_value);

/// File locations inside one run directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path ensemble() const { return root / "ensemble.spkl"; }
  std::filesystem::path train_data() const { return root / "data" / "train.msdt"; }
  std::filesystem::path seen_data() const { return root / "data" / "test_seen.msdt"; }
  std::filesystem::path unseen_data() const { return root / "data" / "test_unseen.msdt"; }
  std::filesystem::path gmvae() const { return root / "models" / "gmvae.ckpt"; }
  std::filesystem::path gmvae_log() const { return root / "models" / "gmvae_log.csv"; }
  std::filesystem::path ae() const { return root / "models" / "ae.ckpt"; }
  std::filesystem::path ae_log() const { return root / "models" / "ae_log.csv"; }
  std::filesystem::path cae() const { return root / "models" / "cae.ckpt"; }
  std::filesystem::path cae_log() const { return root / "models" / "cae_log.csv"; }
  std::filesystem::path report() const { return root / "report"; }
  std::filesystem::path manifest() const { return root / "manifest.json"; }
};

/// Receives one human-readable progress line at a time.
using Progress = std::function<void(const std::string&)>;

enum class ModelKind { gmvae, ae, cae };
ModelKind parse_model_kind(std::string_view text);
std::string_view to_string(ModelKind kind);

/// Each stage checks its prerequisites, writes its artifacts and refreshes
/// the manifest.
void run_simulate(const ExperimentConfig& config, const RunLayout& run, const Progress& progress = {});
void run_synth(const ExperimentConfig& config, const RunLayout& run, const Progress& progress = {});
void run_train(const ExperimentConfig& config, const RunLayout& run, ModelKind model,
               const Progress& progress = {});
EvalReport run_eval(const ExperimentConfig& config, const RunLayout& run,
                    const Progress& progress = {});

struct DemoResult {
  EvalReport experiment1;
  EvalReport experiment2;
};

/// Every stage for both experiments under root/experiment1 and
/// root/experiment2, then a root manifest covering both.
DemoResult run_demo(const ExperimentConfig& config, const std::filesystem::path& root,
                    const Progress& progress = {});

/// manifest.json: the config hash and the FNV-1a hash of every other file
/// under `dir`, keyed by relative path.
void write_manifest(const std::filesystem::path& dir, std::uint64_t config_hash,
                    std::optional<int> experiment);

}  // namespace bendlens
