#pragma once

#include <cstddef>

#include "bendlens/rng.hpp"
#include "bendlens/tensor.hpp"

/// Differentiable operations on Tensor. Every function records its backward
/// edge when an input requires a gradient.
namespace bendlens::ops {

// Elementwise, operands of identical shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
/// Natural log; inputs must be positive.
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// Clamps into [lo, hi]; the gradient is zero where the clamp is active.
Tensor clamp(const Tensor& a, double lo, double hi);

/// (N, F) + (F) broadcast over rows.
Tensor add_rowwise(const Tensor& a, const Tensor& row);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// (N, F) -> (N): sum over the feature axis.
Tensor row_sum(const Tensor& a);

// Structural.
Tensor reshape(const Tensor& a, Shape shape);
/// (N, ...) -> (N, prod(...)).
Tensor flatten(const Tensor& a);
/// (N, F1) ++ (N, F2) -> (N, F1 + F2).
Tensor concat_cols(const Tensor& a, const Tensor& b);

// Linear algebra.
/// (N, K) x (K, M) -> (N, M).
Tensor matmul(const Tensor& a, const Tensor& b);
/// x (N, in), weight (out, in), optional bias (out) -> x weight^T + bias.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Row-wise normalizers over (N, K).
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);

// Image ops on NCHW tensors.
struct ConvGeometry {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t output_padding = 0;  // transposed convolution only
};

std::size_t conv_output_extent(std::size_t in, const ConvGeometry& g);
std::size_t transposed_conv_output_extent(std::size_t in, const ConvGeometry& g);

/// x (B, Cin, H, W), weight (Cout, Cin, k, k), optional bias (Cout).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g);
/// x (B, Cin, H, W), weight (Cin, Cout, k, k), optional bias (Cout); the
/// adjoint of conv2d with the same geometry.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        const ConvGeometry& g);
/// Non-overlapping window x window max pooling; H and W must divide evenly.
Tensor max_pool2d(const Tensor& x, std::size_t window);
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

/// Normalizes per feature of (N, F) or per channel of (N, C, H, W).
/// Training mode uses batch statistics and updates the running buffers
/// in place with an exponential moving average.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training,
                  double momentum, double eps);

/// Inverted dropout: zeroes with probability `rate` and rescales survivors
/// by 1 / (1 - rate). Identity when not training.
Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

}  // namespace bendlens::ops
