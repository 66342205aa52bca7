#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "bendlens/ops.hpp"
#include "bendlens/rng.hpp"
#include "bendlens/tensor.hpp"

namespace bendlens {

enum class LayerKind {
  dense,
  conv2d,
  transposed_conv2d,
  batchnorm,
  relu,
  sigmoid,
  dropout,
  maxpool2d,
};

std::string_view to_string(LayerKind kind);

enum class Mode { train, eval };

/// Size parameters of one layer. Which fields matter depends on `kind`:
/// dense uses in/out features; the convolutions use in/out channels and the
/// geometry; batchnorm uses `in` as its feature or channel count; dropout
/// uses `rate`; maxpool2d uses `window`.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;
  std::size_t out = 0;
  ops::ConvGeometry geometry{};
  double rate = 0.0;
  std::size_t window = 0;
  double momentum = 0.1;
  double eps = 1e-8;

  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                          std::size_t padding);
  static LayerSpec transposed_conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                                     std::size_t stride, std::size_t padding,
                                     std::size_t output_padding);
  static LayerSpec batchnorm(std::size_t features);
  static LayerSpec relu();
  static LayerSpec sigmoid();
  static LayerSpec dropout(double rate);
  static LayerSpec maxpool2d(std::size_t window);

  /// Throws std::invalid_argument when a size parameter is out of range.
  void validate() const;
  /// Output shape for a given input shape; throws ShapeError on mismatch.
  Shape output_shape(const Shape& input) const;
};

/// A layer instance: spec, trainable parameters and (for batchnorm) running
/// statistics.
class Layer {
 public:
  /// Fan-in scaled uniform weights, zero biases, unit/zero batchnorm affine.
  Layer(std::string name, LayerSpec spec, Rng& init_rng);

  const std::string& name() const noexcept { return name_; }
  const LayerSpec& spec() const noexcept { return spec_; }

  Tensor forward(const Tensor& input, Mode mode, Rng& rng);

  /// Trainable tensors, named "<layer>.<param>".
  std::vector<NamedTensor> parameters() const;
  /// Trainable tensors plus running statistics; what a checkpoint stores.
  std::vector<NamedTensor> state() const;

 private:
  std::string name_;
  LayerSpec spec_;
  Tensor weight_;
  Tensor bias_;
  Tensor running_mean_;
  Tensor running_var_;
};

/// Ordered list of layers applied one after another.
class Sequential {
 public:
  Sequential() = default;
  explicit Sequential(std::string name) : name_(std::move(name)) {}

  Sequential& add(LayerSpec spec, Rng& init_rng);
  Tensor forward(const Tensor& input, Mode mode, Rng& rng);

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> state() const;
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  Shape output_shape(Shape input) const;

 private:
  std::string name_;
  std::vector<Layer> layers_;
};

/// Appends the tensors of `src` to `dst`.
void append(std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src);

}  // namespace bendlens
