#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bendlens/dataset.hpp"
#include "bendlens/rng.hpp"
#include "bendlens/tensor.hpp"

namespace bendlens {

/// Geometry shared by every network input: `channels` measurement channels,
/// each an M = side * side vector reshaped onto a side x side grid.
struct InputGeometry {
  std::size_t channels = 2;
  std::size_t side = 16;

  std::size_t length() const noexcept { return channels * side * side; }
};

/// Infers the input geometry from the first record (y length = channels *
/// side^2 with side^2 = image pixel count). Throws if records disagree.
InputGeometry infer_geometry(const MeasurementDataset& dataset, std::size_t side);

/// Stacks the measurement vectors of `indices` into (B, channels, side, side).
Tensor measurement_batch(const MeasurementDataset& dataset, std::span<const std::size_t> indices,
                         const InputGeometry& geometry);

/// Stacks the embedded images of `indices` into (B, side * side).
Tensor image_batch(const MeasurementDataset& dataset, std::span<const std::size_t> indices);

std::vector<int> label_batch(const MeasurementDataset& dataset,
                             std::span<const std::size_t> indices);

/// Fisher-Yates permutation of 0 .. n-1.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

/// Splits `order` into consecutive chunks of at most `batch` entries. A
/// trailing chunk of one is merged into its predecessor.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   std::size_t batch);

}  // namespace bendlens
