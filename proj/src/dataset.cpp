#include "bendlens/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <set>
#include <stdexcept>

#include "bendlens/binary_io.hpp"
#include "bendlens/rng.hpp"

namespace bendlens {
namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

}  // namespace

std::string_view to_string(ImageSource source) {
  return source == ImageSource::idx_file ? "idx_file" : "synthetic_shapes";
}

std::string_view to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::all: return "all";
    case SplitTag::train: return "train";
    case SplitTag::test_seen: return "test_seen";
    case SplitTag::test_unseen: return "test_unseen";
  }
  return "all";
}

void LabelledImageSet::validate() const {
  if (!is_power_of_two(side)) {
    throw std::invalid_argument("image side " + std::to_string(side) + " is not a power of two");
  }
  if (k == 0) throw std::invalid_argument("image set has no classes");
  if (pixels.size() != count() * pixel_count()) {
    throw std::invalid_argument("image set pixel buffer does not match count * side^2");
  }
  std::vector<std::size_t> per_class(k, 0);
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw std::invalid_argument("label " + std::to_string(label) + " outside [0, " +
                                  std::to_string(k) + ")");
    }
    ++per_class[static_cast<std::size_t>(label)];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (per_class[c] == 0) {
      throw std::invalid_argument("class " + std::to_string(c) + " has no samples");
    }
  }
}

std::vector<double> resize_nearest_pad(std::span<const double> image, std::size_t src_side,
                                       std::size_t side) {
  if (image.size() != src_side * src_side) {
    throw std::invalid_argument("resize: image is not src_side x src_side");
  }
  std::vector<double> out(side * side, 0.0);
  if (side < src_side) {
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        const std::size_t sr = (2 * r + 1) * src_side / (2 * side);
        const std::size_t sc = (2 * c + 1) * src_side / (2 * side);
        out[r * side + c] = image[sr * src_side + sc];
      }
    }
    return out;
  }
  const std::size_t factor = side / src_side;
  const std::size_t scaled = factor * src_side;
  const std::size_t pad = (side - scaled) / 2;
  for (std::size_t r = 0; r < scaled; ++r) {
    for (std::size_t c = 0; c < scaled; ++c) {
      out[(r + pad) * side + (c + pad)] = image[(r / factor) * src_side + (c / factor)];
    }
  }
  return out;
}

LabelledImageSet decode_idx(std::span<const std::uint8_t> image_bytes,
                            std::span<const std::uint8_t> label_bytes, const IdxOptions& options) {
  ByteReader ir(image_bytes);
  if (ir.u32_be() != kIdxImageMagic) {
    throw FormatError(FormatErrorKind::bad_magic, "IDX image file magic is not 0x00000803");
  }
  const std::size_t count = ir.u32_be();
  const std::size_t rows = ir.u32_be();
  const std::size_t cols = ir.u32_be();
  if (rows != cols || rows == 0) {
    throw FormatError(FormatErrorKind::invalid_field,
                      "IDX images are " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  ByteReader lr(label_bytes);
  if (lr.u32_be() != kIdxLabelMagic) {
    throw FormatError(FormatErrorKind::bad_magic, "IDX label file magic is not 0x00000801");
  }
  const std::size_t label_count = lr.u32_be();
  if (label_count != count) {
    throw FormatError(FormatErrorKind::count_mismatch,
                      std::to_string(label_count) + " labels for " + std::to_string(count) +
                          " images");
  }
  const auto pixels = ir.raw(count * rows * cols);
  const auto labels = lr.raw(count);

  const std::size_t side = options.side;
  if (!is_power_of_two(side)) {
    throw std::invalid_argument("IDX target side " + std::to_string(side) +
                                " is not a power of two");
  }
  LabelledImageSet set;
  set.side = side;
  set.source = ImageSource::idx_file;
  std::map<int, std::size_t> taken;
  std::vector<double> src(rows * cols);
  int max_label = -1;
  for (std::size_t i = 0; i < count; ++i) {
    const int label = labels[i];
    if (options.max_classes != 0 && static_cast<std::size_t>(label) >= options.max_classes) continue;
    if (options.per_class != 0 && taken[label] >= options.per_class) continue;
    ++taken[label];
    for (std::size_t p = 0; p < src.size(); ++p) {
      src[p] = static_cast<double>(pixels[i * src.size() + p]) / 255.0;
    }
    const auto img = resize_nearest_pad(src, rows, side);
    set.pixels.insert(set.pixels.end(), img.begin(), img.end());
    set.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  set.k = options.max_classes != 0 ? options.max_classes : static_cast<std::size_t>(max_label + 1);
  return set;
}

LabelledImageSet read_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                          const IdxOptions& options) {
  return decode_idx(read_file(images), read_file(labels), options);
}

std::string_view shape_class_name(std::size_t label) {
  static constexpr std::string_view names[kShapeClassCount] = {
      "filled_square", "hollow_square", "disk",     "cross",
      "horizontal_bars", "vertical_bars", "diagonal", "ring"};
  if (label >= kShapeClassCount) throw std::out_of_range("shape class out of range");
  return names[label];
}

namespace {

// Pixel-centre membership test for one jittered instance of a shape class.
struct ShapeInstance {
  std::size_t label;
  double cx, cy, half, stroke;

  bool covers(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double ax = std::abs(dx), ay = std::abs(dy);
    const bool in_box = ax <= half && ay <= half;
    switch (label) {
      case 0: return in_box;
      case 1: return in_box && (ax > half - stroke || ay > half - stroke);
      case 2: return dx * dx + dy * dy <= half * half;
      case 3: return in_box && (ax <= stroke / 2 + 0.5 || ay <= stroke / 2 + 0.5);
      case 4: return in_box && std::fmod(dy + half, 2.0 * stroke) < stroke;
      case 5: return in_box && std::fmod(dx + half, 2.0 * stroke) < stroke;
      case 6: return in_box && std::abs(dx - dy) <= stroke;
      case 7: {
        const double r = std::sqrt(dx * dx + dy * dy);
        return r <= half && r > half - stroke;
      }
      default: return false;
    }
  }
};

}  // namespace

LabelledImageSet gen_shapes(std::size_t count, std::size_t k, std::size_t side,
                            std::uint64_t seed) {
  if (k == 0 || k > kShapeClassCount) {
    throw std::invalid_argument("gen_shapes: k must be in [1, 8], got " + std::to_string(k));
  }
  if (side < 8 || !is_power_of_two(side)) {
    throw std::invalid_argument("gen_shapes: side must be a power of two >= 8, got " +
                                std::to_string(side));
  }
  if (count < k) {
    throw std::invalid_argument("gen_shapes: count must cover every class");
  }
  LabelledImageSet set;
  set.side = side;
  set.k = k;
  set.source = ImageSource::synthetic_shapes;
  set.pixels.assign(count * side * side, 0.0);
  set.labels.resize(count);
  const double s = static_cast<double>(side);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    ShapeInstance shape;
    shape.label = i % k;
    shape.half = s * rng.uniform(0.24, 0.40);
    shape.stroke = std::max(1.0, std::round(s * rng.uniform(0.08, 0.14)));
    shape.cx = rng.uniform(shape.half, s - shape.half);
    shape.cy = rng.uniform(shape.half, s - shape.half);
    set.labels[i] = static_cast<int>(shape.label);
    double* img = set.pixels.data() + i * side * side;
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        if (shape.covers(static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5)) {
          img[r * side + c] = 1.0;
        }
      }
    }
  }
  return set;
}

void add_measurement_noise(std::span<double> y, double noise_std, std::uint64_t seed) {
  if (noise_std <= 0.0) return;
  Rng rng(seed);
  const double limit = 5.0 * noise_std;
  for (auto& v : y) v += std::clamp(noise_std * rng.normal(), -limit, limit);
}

void synthesize_streaming(const LabelledImageSet& images, std::span<const std::string> config_ids,
                          const std::function<Matrix(const std::string&)>& matrix_for,
                          const SynthesisOptions& options,
                          const std::function<void(MeasurementRecord&&)>& sink) {
  const std::size_t n = images.pixel_count();
  for (std::size_t ci = 0; ci < config_ids.size(); ++ci) {
    const Matrix a = matrix_for(config_ids[ci]);
    if (a.cols != n) {
      throw std::invalid_argument("synthesize: ensemble has N = " + std::to_string(a.cols) +
                                  " pixels, images have " + std::to_string(n));
    }
    const auto bg = simulate_backgrounds(a);
    for (std::size_t i = 0; i < images.count(); ++i) {
      const auto x = images.image(i);
      MeasurementRecord rec;
      rec.config_id = config_ids[ci];
      rec.label = images.labels[i];
      rec.holdout = options.holdout;
      rec.noise_seed = mix_seed(options.noise_seed, ci * images.count() + i);
      const auto raw = forward_measure(a, x, options.noise_std);
      rec.y = apply_normalization(raw.values, options.damping, bg.white, bg.black,
                                  options.channels)
                  .values;
      add_measurement_noise(rec.y, raw.noise_std, rec.noise_seed);
      if (options.embed_images) rec.image.assign(x.begin(), x.end());
      sink(std::move(rec));
    }
  }
}

MeasurementDataset synthesize_measurements(const LabelledImageSet& images,
                                           const SpeckleEnsemble& ensemble,
                                           std::span<const std::string> config_ids,
                                           const SynthesisOptions& options) {
  if (ensemble.pixels != images.pixel_count()) {
    throw std::invalid_argument("synthesize: ensemble has N = " + std::to_string(ensemble.pixels) +
                                " pixels, images have " + std::to_string(images.pixel_count()));
  }
  MeasurementDataset ds;
  ds.ensemble_hash = ensemble_hash(ensemble);
  ds.k = images.k;
  ds.records.reserve(images.count() * config_ids.size());
  synthesize_streaming(
      images, config_ids, [&](const std::string& id) { return ensemble.matrix(id); }, options,
      [&](MeasurementRecord&& r) { ds.records.push_back(std::move(r)); });
  return ds;
}

DatasetSplits split_by_config(const MeasurementDataset& dataset,
                              std::span<const std::string> train_ids,
                              std::span<const std::string> unseen_ids) {
  const std::set<std::string> train(train_ids.begin(), train_ids.end());
  const std::set<std::string> unseen(unseen_ids.begin(), unseen_ids.end());
  for (const auto& id : unseen) {
    if (train.count(id)) {
      throw std::invalid_argument("configuration '" + id + "' is both a train and an unseen id");
    }
  }
  DatasetSplits out;
  for (auto* part : {&out.train, &out.test_seen, &out.test_unseen}) {
    part->ensemble_hash = dataset.ensemble_hash;
    part->k = dataset.k;
  }
  out.train.split = SplitTag::train;
  out.test_seen.split = SplitTag::test_seen;
  out.test_unseen.split = SplitTag::test_unseen;
  for (const auto& r : dataset.records) {
    if (train.count(r.config_id)) {
      (r.holdout ? out.test_seen : out.train).records.push_back(r);
    } else if (unseen.count(r.config_id)) {
      out.test_unseen.records.push_back(r);
    } else {
      throw std::invalid_argument("record at configuration '" + r.config_id +
                                  "' matches neither the train nor the unseen ids");
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_dataset(const MeasurementDataset& ds) {
  ByteWriter w;
  w.magic("MSDT");
  w.u32(kDatasetVersion);
  w.u64(ds.ensemble_hash);
  w.u8(static_cast<std::uint8_t>(ds.split));
  w.u32(static_cast<std::uint32_t>(ds.k));
  w.u32(static_cast<std::uint32_t>(ds.records.size()));
  for (const auto& r : ds.records) {
    w.string(r.config_id);
    w.u8(static_cast<std::uint8_t>(r.label));
    w.u8(r.holdout ? 1 : 0);
    w.u64(r.noise_seed);
    w.u32(static_cast<std::uint32_t>(r.y.size()));
    w.f64s(r.y);
    w.u8(r.image.empty() ? 0 : 1);
    if (!r.image.empty()) {
      w.u32(static_cast<std::uint32_t>(r.image.size()));
      w.f64s(r.image);
    }
  }
  return w.take();
}

MeasurementDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("MSDT");
  const auto version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError(FormatErrorKind::unsupported_version,
                      "dataset version " + std::to_string(version));
  }
  MeasurementDataset ds;
  ds.ensemble_hash = r.u64();
  const auto split = r.u8();
  if (split > static_cast<std::uint8_t>(SplitTag::test_unseen)) {
    throw FormatError(FormatErrorKind::invalid_field, "split tag " + std::to_string(split));
  }
  ds.split = static_cast<SplitTag>(split);
  ds.k = r.u32();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    MeasurementRecord rec;
    rec.config_id = r.string();
    rec.label = r.u8();
    rec.holdout = r.u8() != 0;
    rec.noise_seed = r.u64();
    rec.y = r.f64s(r.u32());
    if (r.u8() != 0) rec.image = r.f64s(r.u32());
    ds.records.push_back(std::move(rec));
  }
  if (!r.at_end()) {
    throw FormatError(FormatErrorKind::count_mismatch,
                      std::to_string(r.remaining()) + " trailing bytes after " +
                          std::to_string(count) + " records");
  }
  return ds;
}

void save_dataset(const std::filesystem::path& path, const MeasurementDataset& dataset) {
  write_file(path, encode_dataset(dataset));
}

MeasurementDataset load_dataset(const std::filesystem::path& path,
                                std::optional<std::uint64_t> expected_hash,
                                std::vector<std::string>* warnings) {
  auto ds = decode_dataset(read_file(path));
  if (expected_hash && *expected_hash != ds.ensemble_hash) {
    const std::string msg = "warning: " + path.string() + " was synthesized from ensemble " +
                            hex64(ds.ensemble_hash) + ", expected " + hex64(*expected_hash);
    if (warnings) {
      warnings->push_back(msg);
    } else {
      std::cerr << msg << '\n';
    }
  }
  return ds;
}

}  // namespace bendlens
