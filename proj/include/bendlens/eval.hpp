#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace bendlens {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE), capped at kPsnrCap when the inputs match exactly.
double psnr(std::span<const double> x, std::span<const double> estimate, double peak = 1.0);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population

  bool operator==(const MeanStd&) const = default;
};

/// Arithmetic mean and population standard deviation; empty input throws.
MeanStd mean_std(std::span<const double> values);
inline MeanStd accuracy_stats(std::span<const double> per_config) { return mean_std(per_config); }

struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::size_t> counts;  // row = true class, column = predicted

  std::size_t total() const;
  double accuracy() const;
  /// Rows divided by their sums; rows of absent classes stay zero.
  std::vector<double> normalized() const;
};

ConfusionMatrix confusion_matrix(std::span<const int> predicted, std::span<const int> labels,
                                 std::size_t k);

/// Element-wise mean of the row-normalized matrices.
std::vector<double> average_normalized(const std::vector<ConfusionMatrix>& matrices);

struct SymmetricEigen {
  std::size_t n = 0;
  std::vector<double> values;   // descending
  std::vector<double> vectors;  // row i is the unit eigenvector of values[i]
  std::size_t sweeps = 0;
};

/// Cyclic Jacobi rotations on a symmetric n x n matrix (row-major) until the
/// off-diagonal Frobenius norm is at most `tolerance` times the matrix norm.
/// Each eigenvector's largest-magnitude entry is made positive.
SymmetricEigen jacobi_eigen(std::vector<double> matrix, std::size_t n, double tolerance = 1e-10,
                            std::size_t max_sweeps = 100);

struct PcaResult {
  std::size_t n = 0;
  std::size_t components = 0;
  std::vector<double> projected;  // n x components
  std::vector<double> axes;       // components x D, unit rows
  std::vector<double> explained;  // variance fraction per component
};

/// Centers the n x d row vectors and projects them onto the top components
/// of their covariance. When n < d the eigenproblem is solved on the n x n
/// Gram matrix, which has the same nonzero spectrum.
PcaResult pca_project(std::span<const double> vectors, std::size_t n, std::size_t d,
                      std::size_t components = 3);

/// Mean silhouette with Euclidean distance. Needs >= 2 clusters, each with
/// >= 2 points.
double silhouette(std::span<const double> points, std::size_t n, std::size_t d,
                  std::span<const int> labels);

// ---------------------------------------------------------------------------
// Report

struct PsnrRow {
  std::string config;
  std::string method;
  std::string group;  // "seen" or "unseen"
  MeanStd psnr;
  std::size_t count = 0;

  bool operator==(const PsnrRow&) const = default;
};

struct AccuracyRow {
  std::string config;
  std::string method;
  std::string group;
  double accuracy = 0.0;
  std::size_t count = 0;

  bool operator==(const AccuracyRow&) const = default;
};

struct MethodSummary {
  MeanStd seen_psnr;    // over per-config means
  MeanStd unseen_psnr;
  double psnr_gap = 0.0;  // seen mean - unseen mean
  MeanStd seen_accuracy;
  MeanStd unseen_accuracy;
  std::vector<double> unseen_confusion;  // k x k, averaged row-normalized

  bool operator==(const MethodSummary&) const = default;
};

struct ProjectionReport {
  std::string which;  // "raw" or "latent"
  std::vector<double> points;  // n x 3
  std::vector<int> labels;
  std::vector<std::string> configs;
  std::vector<double> explained;
  double silhouette = 0.0;

  bool operator==(const ProjectionReport&) const = default;
};

struct EvalReport {
  int experiment = 1;
  std::string illumination;
  std::size_t k = 0;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::string> seen_configs;
  std::vector<std::string> unseen_configs;
  std::map<std::string, std::string> hashes;  // ensemble and model checkpoints
  std::vector<PsnrRow> psnr;
  std::vector<AccuracyRow> accuracy;
  /// Keyed by reconstruction method ("gmvae", "ae"); the AE entry carries
  /// the C-AE classification numbers.
  std::map<std::string, MethodSummary> summary;
  std::vector<ProjectionReport> projections;

  bool operator==(const EvalReport&) const = default;
};

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

/// Writes report.json, psnr.csv, confusion_<method>.csv, pca_<which>.csv and
/// pca_<which>.svg. Output depends only on the report value.
void emit_report(const EvalReport& report, const std::filesystem::path& dir);

/// Scatter of the first two components, one fill per class and one marker
/// shape per configuration.
std::string projection_svg(const ProjectionReport& projection);

/// %.17g
std::string format_double(double value);

}  // namespace bendlens
