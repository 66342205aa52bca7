#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bendlens/fiber.hpp"

namespace bendlens {

enum class ImageSource { idx_file, synthetic_shapes };

std::string_view to_string(ImageSource source);

/// Square grayscale images in [0, 1] with class labels in [0, k).
struct LabelledImageSet {
  std::size_t side = 0;
  std::size_t k = 0;
  std::vector<double> pixels;  // count * side * side, image-major
  std::vector<int> labels;
  ImageSource source = ImageSource::synthetic_shapes;

  std::size_t count() const noexcept { return labels.size(); }
  std::size_t pixel_count() const noexcept { return side * side; }
  std::span<const double> image(std::size_t i) const {
    return {pixels.data() + i * pixel_count(), pixel_count()};
  }

  /// Throws std::invalid_argument when the invariants do not hold: side a
  /// power of two, labels in range, every class present.
  void validate() const;
};

struct IdxOptions {
  std::size_t side = 64;
  /// Keep only labels below this value (0 keeps every class).
  std::size_t max_classes = 0;
  /// Keep at most this many images per class (0 keeps all).
  std::size_t per_class = 0;
};

/// Reads an IDX image/label pair (u8 pixels, big-endian header). Images are
/// resampled to options.side by nearest-neighbour scaling with an integer
/// factor followed by zero padding of the border.
LabelledImageSet read_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                          const IdxOptions& options = {});
LabelledImageSet decode_idx(std::span<const std::uint8_t> images,
                            std::span<const std::uint8_t> labels, const IdxOptions& options = {});

/// Nearest-neighbour resampling of a src_side x src_side image onto `side`.
/// Upscales by floor(side / src_side) and centres with zero padding; when
/// side < src_side the image is subsampled instead.
std::vector<double> resize_nearest_pad(std::span<const double> image, std::size_t src_side,
                                       std::size_t side);

inline constexpr std::size_t kShapeClassCount = 8;

/// Class names of the synthetic shape set, in label order.
std::string_view shape_class_name(std::size_t label);

/// Binary geometric shapes with random position and scale. Labels cycle
/// 0, 1, ..., k-1 so every class count is within one of count / k.
LabelledImageSet gen_shapes(std::size_t count, std::size_t k, std::size_t side, std::uint64_t seed);

struct MeasurementRecord {
  std::string config_id;
  int label = 0;
  std::vector<double> y;      // channel-major, channels * M
  std::vector<double> image;  // empty when images are not embedded
  std::uint64_t noise_seed = 0;
  bool holdout = false;  // the image is not part of the training image set
};

enum class SplitTag { all, train, test_seen, test_unseen };

std::string_view to_string(SplitTag tag);

struct MeasurementDataset {
  SplitTag split = SplitTag::all;
  std::uint64_t ensemble_hash = 0;
  std::size_t k = 0;
  std::vector<MeasurementRecord> records;

  std::size_t size() const noexcept { return records.size(); }
  bool operator==(const MeasurementDataset&) const = default;
};

inline bool operator==(const MeasurementRecord& a, const MeasurementRecord& b) {
  return a.config_id == b.config_id && a.label == b.label && a.y == b.y && a.image == b.image &&
         a.noise_seed == b.noise_seed && a.holdout == b.holdout;
}

struct SynthesisOptions {
  double noise_std = kDefaultNoiseStd;
  double damping = kDampingExperiment1;
  NormalizationChannels channels = NormalizationChannels::both;
  std::uint64_t noise_seed = 0;
  bool embed_images = true;
  bool holdout = false;
};

/// Gaussian noise added to a normalized measurement, clipped at five
/// standard deviations so every channel stays inside [-5 sd, 1 + 5 sd].
void add_measurement_noise(std::span<double> y, double noise_std, std::uint64_t seed);

/// Streams records one configuration at a time: `matrix_for` is called once
/// per id and its matrix dropped before the next id, and every record is
/// handed to `sink` as soon as it is complete.
void synthesize_streaming(const LabelledImageSet& images, std::span<const std::string> config_ids,
                          const std::function<Matrix(const std::string&)>& matrix_for,
                          const SynthesisOptions& options,
                          const std::function<void(MeasurementRecord&&)>& sink);

MeasurementDataset synthesize_measurements(const LabelledImageSet& images,
                                           const SpeckleEnsemble& ensemble,
                                           std::span<const std::string> config_ids,
                                           const SynthesisOptions& options = {});

struct DatasetSplits {
  MeasurementDataset train;
  MeasurementDataset test_seen;
  MeasurementDataset test_unseen;
};

/// Routes records by configuration id. Records at train configurations go
/// to train, or to test_seen when their image is held out; records at
/// unseen configurations go to test_unseen. A record whose id is in neither
/// set is rejected, so the three outputs always partition the input.
DatasetSplits split_by_config(const MeasurementDataset& dataset,
                              std::span<const std::string> train_ids,
                              std::span<const std::string> unseen_ids);

// MSDT layout: "MSDT" | u32 version | u64 ensemble hash | u8 split | u32 k |
// u32 count | per record { u32 id_len | id | u8 label | u8 holdout |
// u64 noise_seed | u32 y_len | f64 y[y_len] | u8 has_image |
// [u32 image_len | f64 image[image_len]] }.
inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const MeasurementDataset& dataset);
MeasurementDataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const std::filesystem::path& path, const MeasurementDataset& dataset);

/// When `expected_hash` is given and differs from the stored hash, a warning
/// is appended to `warnings` (or printed to stderr if it is null).
MeasurementDataset load_dataset(const std::filesystem::path& path,
                                std::optional<std::uint64_t> expected_hash = std::nullopt,
                                std::vector<std::string>* warnings = nullptr);

}  // namespace bendlens
