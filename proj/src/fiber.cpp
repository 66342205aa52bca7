#include "bendlens/fiber.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "bendlens/binary_io.hpp"
#include "bendlens/rng.hpp"

namespace bendlens {
namespace {

std::string format_position(double mm) {
  const double rounded = std::round(mm);
  if (std::abs(mm - rounded) < 1e-9) {
    return std::to_string(static_cast<long long>(rounded));
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", mm);
  std::string s(buf);
  while (!s.empty() && s.back() == '0') s.pop_back();
  return s;
}

}  // namespace

std::vector<FiberConfiguration> make_config_grid(std::size_t count,
                                                 const ConfigGridOptions& options) {
  if (count < 2) {
    throw std::invalid_argument("make_config_grid: count must be at least 2, got " +
                                std::to_string(count));
  }
  std::vector<FiberConfiguration> grid;
  grid.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(count - 1);
    FiberConfiguration c;
    c.bend = t;
    c.arm_position_mm = options.arm_start_mm + (options.arm_end_mm - options.arm_start_mm) * t;
    c.rotation_deg =
        options.rotation_start_deg + (options.rotation_end_deg - options.rotation_start_deg) * t;
    c.id = "C_" + format_position(c.arm_position_mm);
    grid.push_back(std::move(c));
  }
  return grid;
}

std::string_view to_string(IlluminationMode mode) {
  return mode == IlluminationMode::wavefront_shaped ? "wavefront_shaped" : "random";
}

IlluminationMode parse_illumination_mode(std::string_view text) {
  if (text == "wavefront_shaped") return IlluminationMode::wavefront_shaped;
  if (text == "random") return IlluminationMode::random;
  throw std::invalid_argument("unknown illumination mode '" + std::string(text) + "'");
}

const Matrix& SpeckleEnsemble::matrix(std::string_view config_id) const {
  for (std::size_t i = 0; i < configurations.size(); ++i) {
    if (configurations[i].id == config_id) return matrices[i];
  }
  throw std::out_of_range("ensemble has no configuration '" + std::string(config_id) + "'");
}

const FiberConfiguration& SpeckleEnsemble::configuration(std::string_view config_id) const {
  for (const auto& c : configurations) {
    if (c.id == config_id) return c;
  }
  throw std::out_of_range("ensemble has no configuration '" + std::string(config_id) + "'");
}

bool SpeckleEnsemble::contains(std::string_view config_id) const {
  return std::any_of(configurations.begin(), configurations.end(),
                     [&](const auto& c) { return c.id == config_id; });
}

SpeckleGenerator::SpeckleGenerator(std::size_t patterns, std::size_t pixels, IlluminationMode mode,
                                   double decorrelation_scale, std::uint64_t seed)
    : patterns_(patterns), pixels_(pixels), mode_(mode), scale_(decorrelation_scale), seed_(seed) {
  if (patterns == 0 || pixels == 0) {
    throw std::invalid_argument("speckle generator: M and N must be at least 1");
  }
  if (!(decorrelation_scale > 0.0)) {
    throw std::invalid_argument("speckle generator: decorrelation_scale must be positive");
  }
}

double SpeckleGenerator::mixing_angle(double bend) const {
  return std::clamp(bend / scale_, 0.0, std::numbers::pi / 2.0);
}

std::size_t SpeckleGenerator::spot_position(std::size_t row) const {
  return row * pixels_ / patterns_;
}

Matrix SpeckleGenerator::matrix(double bend) const {
  const double theta = mixing_angle(bend);
  const double c = std::cos(theta), s = std::sin(theta);
  const double field_std = std::sqrt(0.5);  // E|B|^2 = 1
  Matrix a(patterns_, pixels_);
  std::vector<double> b0_re(pixels_), b0_im(pixels_);
  for (std::size_t i = 0; i < patterns_; ++i) {
    // Streams 2i and 2i+1 hold the row's B0 and B1 draws respectively.
    if (mode_ == IlluminationMode::random) {
      Rng r0(mix_seed(seed_, 2 * i));
      for (std::size_t j = 0; j < pixels_; ++j) {
        b0_re[j] = field_std * r0.normal();
        b0_im[j] = field_std * r0.normal();
      }
    } else {
      std::fill(b0_re.begin(), b0_re.end(), 0.0);
      std::fill(b0_im.begin(), b0_im.end(), 0.0);
      b0_re[spot_position(i)] = 1.0;
    }
    Rng r1(mix_seed(seed_, 2 * i + 1));
    auto row = a.row(i);
    double row_max = 0.0;
    for (std::size_t j = 0; j < pixels_; ++j) {
      const double re = c * b0_re[j] + s * field_std * r1.normal();
      const double im = c * b0_im[j] + s * field_std * r1.normal();
      row[j] = re * re + im * im;
      row_max = std::max(row_max, row[j]);
    }
    if (row_max > 0.0) {
      for (auto& v : row) v /= row_max;
    }
  }
  return a;
}

SpeckleEnsemble gen_speckle_ensemble(std::size_t patterns, std::size_t pixels,
                                     const std::vector<FiberConfiguration>& configs,
                                     IlluminationMode mode, double decorrelation_scale,
                                     std::uint64_t seed) {
  SpeckleGenerator gen(patterns, pixels, mode, decorrelation_scale, seed);
  SpeckleEnsemble e;
  e.patterns = patterns;
  e.pixels = pixels;
  e.configurations = configs;
  e.provenance = EnsembleProvenance{mode, seed, decorrelation_scale};
  e.matrices.reserve(configs.size());
  for (const auto& c : configs) e.matrices.push_back(gen.matrix(c.bend));
  return e;
}

RawMeasurement forward_measure(const Matrix& a, std::span<const double> x, double noise_std) {
  if (x.size() != a.cols) {
    throw std::invalid_argument("forward_measure: image has " + std::to_string(x.size()) +
                                " pixels, matrix expects " + std::to_string(a.cols));
  }
  if (noise_std < 0.0) throw std::invalid_argument("forward_measure: negative noise_std");
  RawMeasurement out;
  out.noise_std = noise_std;
  out.values.resize(a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const auto row = a.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) acc += row[j] * x[j];
    out.values[i] = acc;
  }
  return out;
}

std::string_view to_string(NormalizationChannels channels) {
  switch (channels) {
    case NormalizationChannels::both: return "both";
    case NormalizationChannels::first: return "first";
    case NormalizationChannels::second: return "second";
  }
  return "both";
}

NormalizationChannels parse_normalization_channels(std::string_view text) {
  if (text == "both") return NormalizationChannels::both;
  if (text == "first") return NormalizationChannels::first;
  if (text == "second") return NormalizationChannels::second;
  throw std::invalid_argument("unknown normalization channels '" + std::string(text) + "'");
}

std::size_t channel_count(NormalizationChannels channels) {
  return channels == NormalizationChannels::both ? 2 : 1;
}

bool range_normalize(std::span<const double> in, std::span<double> out) {
  const auto [lo_it, hi_it] = std::minmax_element(in.begin(), in.end());
  const double lo = *lo_it, hi = *hi_it;
  const double range = hi - lo;
  if (!(range > 0.0)) {
    std::fill(out.begin(), out.end(), 0.0);
    return false;
  }
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = (in[i] - lo) / range;
  return true;
}

NormalizedMeasurement apply_normalization(std::span<const double> ax, double damping,
                                          std::span<const double> white,
                                          std::span<const double> black,
                                          NormalizationChannels channels) {
  const std::size_t m = ax.size();
  if (m == 0) throw std::invalid_argument("apply_normalization: empty measurement");
  if (!(damping > 0.0)) throw std::invalid_argument("apply_normalization: s must be positive");
  if (white.size() != m || black.size() != m) {
    throw std::invalid_argument("apply_normalization: backgrounds must have length " +
                                std::to_string(m));
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (!(white[i] > black[i])) {
      throw std::invalid_argument("apply_normalization: white background must exceed black at " +
                                  std::to_string(i));
    }
  }
  NormalizedMeasurement out;
  out.values.assign(channel_count(channels) * m, 0.0);
  std::size_t offset = 0;
  if (channels != NormalizationChannels::second) {
    out.degenerate |= !range_normalize(ax, std::span(out.values).subspan(0, m));
    offset = m;
  }
  if (channels != NormalizationChannels::first) {
    std::vector<double> damped(m);
    for (std::size_t i = 0; i < m; ++i) {
      damped[i] = (ax[i] / damping - black[i]) / (white[i] - black[i]);
    }
    out.degenerate |= !range_normalize(damped, std::span(out.values).subspan(offset, m));
  }
  return out;
}

Backgrounds simulate_backgrounds(const Matrix& a) {
  const std::vector<double> ones(a.cols, 1.0);
  Backgrounds bg;
  bg.white = forward_measure(a, ones, 0.0).values;
  bg.black.resize(bg.white.size());
  for (std::size_t i = 0; i < bg.white.size(); ++i) bg.black[i] = kDarkLevel * bg.white[i];
  return bg;
}

double speckle_correlation(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw std::invalid_argument("speckle_correlation: shape mismatch");
  }
  const std::size_t n = a.values.size();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a.values[i];
    mb += b.values[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a.values[i] - ma, db = b.values[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) {
    throw std::invalid_argument("speckle_correlation: zero-variance matrix");
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::vector<std::uint8_t> encode_ensemble(const SpeckleEnsemble& e) {
  ByteWriter w;
  w.magic("SPKL");
  w.u32(kEnsembleVersion);
  w.u32(static_cast<std::uint32_t>(e.patterns));
  w.u32(static_cast<std::uint32_t>(e.pixels));
  w.u32(static_cast<std::uint32_t>(e.configurations.size()));
  for (std::size_t i = 0; i < e.configurations.size(); ++i) {
    w.string(e.configurations[i].id);
    w.f64(e.configurations[i].bend);
    w.f64s(e.matrices[i].values);
  }
  return w.take();
}

SpeckleEnsemble decode_ensemble(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("SPKL");
  const auto version = r.u32();
  if (version != kEnsembleVersion) {
    throw FormatError(FormatErrorKind::unsupported_version,
                      "ensemble version " + std::to_string(version));
  }
  SpeckleEnsemble e;
  e.patterns = r.u32();
  e.pixels = r.u32();
  const auto count = r.u32();
  if (e.patterns == 0 || e.pixels == 0) {
    throw FormatError(FormatErrorKind::invalid_field, "zero ensemble dimension");
  }
  const ConfigGridOptions defaults;
  for (std::uint32_t i = 0; i < count; ++i) {
    FiberConfiguration c;
    c.id = r.string();
    c.bend = r.f64();
    c.arm_position_mm = defaults.arm_start_mm + (defaults.arm_end_mm - defaults.arm_start_mm) * c.bend;
    c.rotation_deg = defaults.rotation_start_deg +
                     (defaults.rotation_end_deg - defaults.rotation_start_deg) * c.bend;
    Matrix m;
    m.rows = e.patterns;
    m.cols = e.pixels;
    m.values = r.f64s(e.patterns * e.pixels);
    e.configurations.push_back(std::move(c));
    e.matrices.push_back(std::move(m));
  }
  if (!r.at_end()) {
    throw FormatError(FormatErrorKind::count_mismatch,
                      std::to_string(r.remaining()) + " trailing bytes after " +
                          std::to_string(count) + " configurations");
  }
  return e;
}

void save_ensemble(const std::filesystem::path& path, const SpeckleEnsemble& ensemble) {
  write_file(path, encode_ensemble(ensemble));
}

SpeckleEnsemble load_ensemble(const std::filesystem::path& path) {
  return decode_ensemble(read_file(path));
}

std::uint64_t ensemble_hash(const SpeckleEnsemble& ensemble) {
  return fnv1a64(encode_ensemble(ensemble));
}

}  // namespace bendlens
