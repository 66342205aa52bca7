#include "bendlens/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bendlens {

GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<NamedTensor> wrt,
                           double eps, std::size_t max_entries_per_tensor) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-3]");
  }
  for (auto& p : wrt) {
    for (double v : p.tensor.data()) {
      if (!std::isfinite(v)) {
        throw std::invalid_argument("grad_check: parameter '" + p.name + "' is not finite");
      }
    }
    p.tensor.zero_grad();
  }
  loss().backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(wrt.size());
  for (const auto& p : wrt) {
    auto g = p.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckResult result;
  for (std::size_t t = 0; t < wrt.size(); ++t) {
    auto values = wrt[t].tensor.mutable_data();
    const std::size_t n = values.size();
    const std::size_t probes =
        max_entries_per_tensor == 0 ? n : std::min(n, max_entries_per_tensor);
    for (std::size_t s = 0; s < probes; ++s) {
      const std::size_t i = probes == n ? s : s * n / probes;
      const double original = values[i];
      values[i] = original + eps;
      const double plus = loss().item();
      values[i] = original - eps;
      const double minus = loss().item();
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[t][i];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double err = scale < 1e-8 ? std::abs(a - numeric) : std::abs(a - numeric) / scale;
      ++result.checked;
      if (err > result.max_error || result.checked == 1) {
        result.max_error = std::max(result.max_error, err);
        if (err >= result.max_error) result.worst = {wrt[t].name, i, a, numeric, err};
      }
    }
  }
  return result;
}

}  // namespace bendlens
