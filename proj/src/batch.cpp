#include "bendlens/batch.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace bendlens {

InputGeometry infer_geometry(const MeasurementDataset& dataset, std::size_t side) {
  if (dataset.records.empty()) throw std::invalid_argument("dataset is empty");
  const std::size_t m = side * side;
  const std::size_t len = dataset.records.front().y.size();
  if (m == 0 || len % m != 0) {
    throw std::invalid_argument("measurement length " + std::to_string(len) +
                                " is not a multiple of side^2 = " + std::to_string(m));
  }
  InputGeometry g{len / m, side};
  for (const auto& r : dataset.records) {
    if (r.y.size() != len) {
      throw std::invalid_argument("records disagree on measurement length");
    }
  }
  return g;
}

Tensor measurement_batch(const MeasurementDataset& dataset, std::span<const std::size_t> indices,
                         const InputGeometry& geometry) {
  const std::size_t len = geometry.length();
  std::vector<double> values;
  values.reserve(indices.size() * len);
  for (auto i : indices) {
    const auto& y = dataset.records.at(i).y;
    if (y.size() != len) {
      throw std::invalid_argument("record " + std::to_string(i) + " has measurement length " +
                                  std::to_string(y.size()) + ", expected " + std::to_string(len));
    }
    values.insert(values.end(), y.begin(), y.end());
  }
  return Tensor({indices.size(), geometry.channels, geometry.side, geometry.side},
                std::move(values));
}

Tensor image_batch(const MeasurementDataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const std::size_t n = dataset.records.at(indices[0]).image.size();
  if (n == 0) throw std::invalid_argument("dataset records carry no images");
  std::vector<double> values;
  values.reserve(indices.size() * n);
  for (auto i : indices) {
    const auto& img = dataset.records.at(i).image;
    if (img.size() != n) {
      throw std::invalid_argument("record " + std::to_string(i) + " has no embedded image");
    }
    values.insert(values.end(), img.begin(), img.end());
  }
  return Tensor({indices.size(), n}, std::move(values));
}

std::vector<int> label_batch(const MeasurementDataset& dataset,
                             std::span<const std::size_t> indices) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (auto i : indices) labels.push_back(dataset.records.at(i).label);
  return labels;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t end = std::min(order.size(), start + batch);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  // A single-sample batch has no batchnorm statistics; fold it into the previous one.
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

}  // namespace bendlens
