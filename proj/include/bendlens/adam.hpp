#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "bendlens/tensor.hpp"

namespace bendlens {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Thrown when a gradient entry is NaN or infinite; names the parameter.
class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with bias correction. Holds first/second moment buffers for exactly
/// the parameter set it was built with.
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamOptions options);

  /// Applies one update from the gradients currently stored on the
  /// parameters. Throws NonFiniteGradient before touching any parameter.
  void step();
  void zero_grad();

  std::uint64_t step_count() const noexcept { return step_count_; }
  const AdamOptions& options() const noexcept { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  const std::vector<NamedTensor>& parameters() const noexcept { return params_; }
  const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }

 private:
  std::vector<NamedTensor> params_;
  AdamOptions options_;
  std::uint64_t step_count_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace bendlens
