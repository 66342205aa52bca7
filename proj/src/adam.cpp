#include "bendlens/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace bendlens {

Adam::Adam(std::vector<NamedTensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  if (!(options_.beta1 > 0.0 && options_.beta1 < 1.0) ||
      !(options_.beta2 > 0.0 && options_.beta2 < 1.0)) {
    throw std::invalid_argument("adam: beta1 and beta2 must lie in (0, 1)");
  }
  if (!(options_.learning_rate > 0.0) || !(options_.epsilon > 0.0)) {
    throw std::invalid_argument("adam: learning rate and epsilon must be positive");
  }
  for (const auto& p : params_) {
    if (!p.tensor.requires_grad()) {
      throw std::invalid_argument("adam: parameter '" + p.name + "' does not require grad");
    }
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void Adam::step() {
  for (const auto& p : params_) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NonFiniteGradient("non-finite gradient in parameter '" + p.name + "'");
      }
    }
  }
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double c1 = 1.0 - std::pow(options_.beta1, t);
  const double c2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& tensor = params_[i].tensor;
    const auto g = tensor.grad();
    auto w = tensor.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      w[j] -= options_.learning_rate * m_hat / (std::sqrt(v_hat) + options_.epsilon);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

}  // namespace bendlens
