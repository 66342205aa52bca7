#pragma once

#include <string>
#include <vector>

#include "bendlens/layers.hpp"

namespace bendlens {

struct GradSuiteOptions {
  std::size_t seeds = 20;
  double tolerance = 1e-4;
  double eps = 1e-5;
};

struct GradSuiteRow {
  std::string name;
  std::size_t seeds = 0;
  std::size_t checked = 0;  // gradient entries probed over all seeds
  double max_error = 0.0;
  bool pass = false;
};

/// Drops the bias of every layer immediately followed by batchnorm. In
/// train mode batchnorm subtracts the batch mean, so such a bias has an
/// exactly zero gradient and a finite-difference probe returns only
/// roundoff.
std::vector<NamedTensor> without_shadowed_biases(std::vector<NamedTensor> params,
                                                 const std::vector<const Layer*>& forward_order);

/// Central-difference checks of every layer kind, the loss terms and the
/// assembled GMVAE, AE and C-AE objectives (sampling noise frozen per call),
/// each over `seeds` random draws.
std::vector<GradSuiteRow> run_gradient_suite(const GradSuiteOptions& options = {});

/// Fixed-width table, one row per entry plus a final verdict line.
std::string format_gradient_table(const std::vector<GradSuiteRow>& rows, double tolerance);

}  // namespace bendlens
