#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bendlens {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

/// One bend state of the fiber. `bend` is the scalar bend parameter t,
/// 0 at the calibrated configuration and 1 at the far end of the sweep.
struct FiberConfiguration {
  std::string id;
  double arm_position_mm = 0.0;
  double rotation_deg = 0.0;
  double bend = 0.0;

  bool operator==(const FiberConfiguration&) const = default;
};

struct ConfigGridOptions {
  double arm_start_mm = 10.0;
  double arm_end_mm = 0.0;
  double rotation_start_deg = 230.0;
  double rotation_end_deg = 280.0;
};

/// Evenly spaced sweep from the calibrated end (t = 0) to the far end
/// (t = 1). Ids are "C_<arm position>", so 11 points give C_10 ... C_0.
std::vector<FiberConfiguration> make_config_grid(std::size_t count,
                                                 const ConfigGridOptions& options = {});

enum class IlluminationMode { wavefront_shaped, random };

std::string_view to_string(IlluminationMode mode);
IlluminationMode parse_illumination_mode(std::string_view text);

struct EnsembleProvenance {
  IlluminationMode mode = IlluminationMode::random;
  std::uint64_t seed = 0;
  double decorrelation_scale = 1.0;
};

/// Measurement matrices A_l, one M x N non-negative matrix per configuration.
struct SpeckleEnsemble {
  std::size_t patterns = 0;  // M
  std::size_t pixels = 0;    // N
  std::vector<FiberConfiguration> configurations;
  std::vector<Matrix> matrices;
  /// Generation parameters; absent for ensembles read from disk, whose
  /// file layout carries only ids, bend values and matrices.
  std::optional<EnsembleProvenance> provenance;

  const Matrix& matrix(std::string_view config_id) const;
  const FiberConfiguration& configuration(std::string_view config_id) const;
  bool contains(std::string_view config_id) const;
};

/// Generates speckle matrices one configuration at a time.
///
/// A(t) = |cos(theta) B0 + sin(theta) B1|^2 with each row scaled to unit
/// max, theta = min(t / decorrelation_scale, pi / 2). B0 and B1 are
/// independent circular complex Gaussian fields (unit mean intensity). In
/// wavefront-shaped mode B0 row i is a unit focal spot at raster position
/// floor(i * N / M), so A(0) is a raster-scan matrix. Rows are drawn from
/// per-row streams so no M x N field needs to stay resident.
class SpeckleGenerator {
 public:
  SpeckleGenerator(std::size_t patterns, std::size_t pixels, IlluminationMode mode,
                   double decorrelation_scale, std::uint64_t seed);

  double mixing_angle(double bend) const;
  Matrix matrix(double bend) const;
  std::size_t spot_position(std::size_t row) const;

 private:
  std::size_t patterns_;
  std::size_t pixels_;
  IlluminationMode mode_;
  double scale_;
  std::uint64_t seed_;
};

SpeckleEnsemble gen_speckle_ensemble(std::size_t patterns, std::size_t pixels,
                                     const std::vector<FiberConfiguration>& configs,
                                     IlluminationMode mode, double decorrelation_scale,
                                     std::uint64_t seed);

inline constexpr double kDefaultNoiseStd = 0.015;
inline constexpr double kDampingExperiment1 = 10.0;
inline constexpr double kDampingExperiment2 = 200.0;
inline constexpr double kDarkLevel = 0.02;

/// Noise-free measurement A x together with the noise level that the
/// normalization stage will add.
struct RawMeasurement {
  std::vector<double> values;
  double noise_std = kDefaultNoiseStd;
};

RawMeasurement forward_measure(const Matrix& a, std::span<const double> x,
                               double noise_std = kDefaultNoiseStd);

enum class NormalizationChannels { both, first, second };

std::string_view to_string(NormalizationChannels channels);
NormalizationChannels parse_normalization_channels(std::string_view text);
std::size_t channel_count(NormalizationChannels channels);

struct NormalizedMeasurement {
  std::vector<double> values;  // channel-major, length channels * M
  bool degenerate = false;     // a channel had zero range and was zeroed
};

/// Rescales to [0, 1] by (v - min) / (max - min). Returns false and zeroes
/// the output when the range is zero.
bool range_normalize(std::span<const double> in, std::span<double> out);

/// Two-channel normalization: channel 1 is the range-normalized A x,
/// channel 2 the range-normalized (A x / s - b) / (w - b).
NormalizedMeasurement apply_normalization(std::span<const double> ax, double damping,
                                          std::span<const double> white,
                                          std::span<const double> black,
                                          NormalizationChannels channels =
                                              NormalizationChannels::both);

/// Simulated white/black backgrounds: w = A 1, b = kDarkLevel * w.
struct Backgrounds {
  std::vector<double> white;
  std::vector<double> black;
};
Backgrounds simulate_backgrounds(const Matrix& a);

/// Pearson correlation of the flattened matrices.
double speckle_correlation(const Matrix& a, const Matrix& b);

// SPKL ensemble file: "SPKL" | u32 version | u32 M | u32 N | u32 count |
// per configuration { u32 id_len | id | f64 bend | f64[M*N] row-major }.
inline constexpr std::uint32_t kEnsembleVersion = 1;

std::vector<std::uint8_t> encode_ensemble(const SpeckleEnsemble& ensemble);
SpeckleEnsemble decode_ensemble(std::span<const std::uint8_t> bytes);
void save_ensemble(const std::filesystem::path& path, const SpeckleEnsemble& ensemble);
SpeckleEnsemble load_ensemble(const std::filesystem::path& path);

/// FNV-1a over the encoded file image.
std::uint64_t ensemble_hash(const SpeckleEnsemble& ensemble);

}  // namespace bendlens
