#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bendlens/tensor.hpp"

namespace bendlens {

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;
};

struct GradCheckResult {
  double max_error = 0.0;
  GradCheckEntry worst;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// `loss` must be a pure function of the tensors in `wrt` (re-seed any
/// sampling inside it). Per entry the error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); when both
/// magnitudes are below 1e-8 the absolute difference is used instead.
/// `max_entries_per_tensor` caps the number of probed entries (spread evenly)
/// to keep large tensors cheap; 0 means all.
GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<NamedTensor> wrt,
                           double eps = 1e-6, std::size_t max_entries_per_tensor = 0);

}  // namespace bendlens
