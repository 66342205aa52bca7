#include "bendlens/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace bendlens {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::transposed_conv2d: return "transposed_conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::dropout: return "dropout";
    case LayerKind::maxpool2d: return "maxpool2d";
  }
  return "unknown";
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.in = in;
  s.out = out;
  return s;
}

LayerSpec LayerSpec::conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                            std::size_t stride, std::size_t padding) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in = in;
  s.out = out;
  s.geometry = {kernel, stride, padding, 0};
  return s;
}

LayerSpec LayerSpec::transposed_conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                                       std::size_t stride, std::size_t padding,
                                       std::size_t output_padding) {
  LayerSpec s;
  s.kind = LayerKind::transposed_conv2d;
  s.in = in;
  s.out = out;
  s.geometry = {kernel, stride, padding, output_padding};
  return s;
}

LayerSpec LayerSpec::batchnorm(std::size_t features) {
  LayerSpec s;
  s.kind = LayerKind::batchnorm;
  s.in = features;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::sigmoid() {
  LayerSpec s;
  s.kind = LayerKind::sigmoid;
  return s;
}

LayerSpec LayerSpec::dropout(double rate) {
  LayerSpec s;
  s.kind = LayerKind::dropout;
  s.rate = rate;
  return s;
}

LayerSpec LayerSpec::maxpool2d(std::size_t window) {
  LayerSpec s;
  s.kind = LayerKind::maxpool2d;
  s.window = window;
  return s;
}

void LayerSpec::validate() const {
  auto fail = [this](const std::string& what) {
    throw std::invalid_argument(std::string(to_string(kind)) + ": " + what);
  };
  switch (kind) {
    case LayerKind::dense:
      if (in == 0 || out == 0) fail("in/out features must be positive");
      break;
    case LayerKind::conv2d:
    case LayerKind::transposed_conv2d:
      if (in == 0 || out == 0) fail("channel counts must be positive");
      if (geometry.kernel == 0 || geometry.stride == 0) fail("kernel and stride must be positive");
      if (kind == LayerKind::transposed_conv2d && geometry.output_padding >= geometry.stride) {
        fail("output_padding must be smaller than stride");
      }
      break;
    case LayerKind::batchnorm:
      if (in == 0) fail("feature count must be positive");
      if (!(momentum > 0.0 && momentum <= 1.0)) fail("momentum must lie in (0, 1]");
      if (!(eps > 0.0)) fail("eps must be positive");
      break;
    case LayerKind::dropout:
      if (!(rate >= 0.0 && rate < 1.0)) fail("rate must lie in [0, 1)");
      break;
    case LayerKind::maxpool2d:
      if (window == 0) fail("window must be positive");
      break;
    case LayerKind::relu:
    case LayerKind::sigmoid:
      break;
  }
}

Shape LayerSpec::output_shape(const Shape& input) const {
  auto mismatch = [&](const std::string& expected) {
    throw ShapeError(std::string(to_string(kind)) + " layer expects " + expected + ", got " +
                     shape_str(input));
  };
  switch (kind) {
    case LayerKind::dense:
      if (input.size() != 2 || input[1] != in) mismatch("[N, " + std::to_string(in) + "]");
      return {input[0], out};
    case LayerKind::conv2d: {
      if (input.size() != 4 || input[1] != in) mismatch("[N, " + std::to_string(in) + ", H, W]");
      const auto h = ops::conv_output_extent(input[2], geometry);
      const auto w = ops::conv_output_extent(input[3], geometry);
      if (h == 0 || w == 0) mismatch("an input large enough for the kernel");
      return {input[0], out, h, w};
    }
    case LayerKind::transposed_conv2d: {
      if (input.size() != 4 || input[1] != in) mismatch("[N, " + std::to_string(in) + ", H, W]");
      const auto h = ops::transposed_conv_output_extent(input[2], geometry);
      const auto w = ops::transposed_conv_output_extent(input[3], geometry);
      if (h == 0 || w == 0) mismatch("an input yielding a positive output");
      return {input[0], out, h, w};
    }
    case LayerKind::batchnorm:
      if ((input.size() != 2 && input.size() != 4) || input[1] != in) {
        mismatch("[N, " + std::to_string(in) + "] or [N, " + std::to_string(in) + ", H, W]");
      }
      return input;
    case LayerKind::maxpool2d:
      if (input.size() != 4 || input[2] % window != 0 || input[3] % window != 0) {
        mismatch("[N, C, H, W] with H, W divisible by " + std::to_string(window));
      }
      return {input[0], input[1], input[2] / window, input[3] / window};
    case LayerKind::relu:
    case LayerKind::sigmoid:
    case LayerKind::dropout:
      return input;
  }
  return input;
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

Layer::Layer(std::string name, LayerSpec spec, Rng& init_rng)
    : name_(std::move(name)), spec_(spec) {
  spec_.validate();
  const auto k = spec_.geometry.kernel;
  switch (spec_.kind) {
    case LayerKind::dense: {
      const double bound = std::sqrt(6.0 / static_cast<double>(spec_.in));
      weight_ = uniform_tensor({spec_.out, spec_.in}, bound, init_rng);
      bias_ = Tensor::zeros({spec_.out}, true);
      break;
    }
    case LayerKind::conv2d: {
      const double bound = std::sqrt(6.0 / static_cast<double>(spec_.in * k * k));
      weight_ = uniform_tensor({spec_.out, spec_.in, k, k}, bound, init_rng);
      bias_ = Tensor::zeros({spec_.out}, true);
      break;
    }
    case LayerKind::transposed_conv2d: {
      // Each output pixel sees roughly in * k^2 / stride^2 taps.
      const double fan_in = static_cast<double>(spec_.in * k * k) /
                            static_cast<double>(spec_.geometry.stride * spec_.geometry.stride);
      const double bound = std::sqrt(6.0 / std::max(fan_in, 1.0));
      weight_ = uniform_tensor({spec_.in, spec_.out, k, k}, bound, init_rng);
      bias_ = Tensor::zeros({spec_.out}, true);
      break;
    }
    case LayerKind::batchnorm:
      weight_ = Tensor::full({spec_.in}, 1.0, true);
      bias_ = Tensor::zeros({spec_.in}, true);
      running_mean_ = Tensor::zeros({spec_.in});
      running_var_ = Tensor::full({spec_.in}, 1.0);
      break;
    default:
      break;
  }
}

Tensor Layer::forward(const Tensor& input, Mode mode, Rng& rng) {
  try {
    spec_.output_shape(input.shape());
  } catch (const ShapeError& e) {
    throw ShapeError("layer '" + name_ + "': " + e.what());
  }
  const bool training = mode == Mode::train;
  switch (spec_.kind) {
    case LayerKind::dense: return ops::linear(input, weight_, bias_);
    case LayerKind::conv2d: return ops::conv2d(input, weight_, bias_, spec_.geometry);
    case LayerKind::transposed_conv2d:
      return ops::conv_transpose2d(input, weight_, bias_, spec_.geometry);
    case LayerKind::batchnorm:
      return ops::batch_norm(input, weight_, bias_, running_mean_, running_var_, training,
                             spec_.momentum, spec_.eps);
    case LayerKind::relu: return ops::relu(input);
    case LayerKind::sigmoid: return ops::sigmoid(input);
    case LayerKind::dropout: return ops::dropout(input, spec_.rate, training, rng);
    case LayerKind::maxpool2d: return ops::max_pool2d(input, spec_.window);
  }
  return input;
}

std::vector<NamedTensor> Layer::parameters() const {
  std::vector<NamedTensor> out;
  if (spec_.kind == LayerKind::batchnorm) {
    out.push_back({name_ + ".gamma", weight_});
    out.push_back({name_ + ".beta", bias_});
  } else if (weight_.defined()) {
    out.push_back({name_ + ".weight", weight_});
    out.push_back({name_ + ".bias", bias_});
  }
  return out;
}

std::vector<NamedTensor> Layer::state() const {
  auto out = parameters();
  if (spec_.kind == LayerKind::batchnorm) {
    out.push_back({name_ + ".running_mean", running_mean_});
    out.push_back({name_ + ".running_var", running_var_});
  }
  return out;
}

Sequential& Sequential::add(LayerSpec spec, Rng& init_rng) {
  const std::string layer_name = name_ + "." + std::to_string(layers_.size()) + "_" +
                                 std::string(to_string(spec.kind));
  layers_.emplace_back(layer_name, spec, init_rng);
  return *this;
}

Tensor Sequential::forward(const Tensor& input, Mode mode, Rng& rng) {
  Tensor x = input;
  for (auto& layer : layers_) x = layer.forward(x, mode, rng);
  return x;
}

std::vector<NamedTensor> Sequential::parameters() const {
  std::vector<NamedTensor> out;
  for (const auto& l : layers_) append(out, l.parameters());
  return out;
}

std::vector<NamedTensor> Sequential::state() const {
  std::vector<NamedTensor> out;
  for (const auto& l : layers_) append(out, l.state());
  return out;
}

Shape Sequential::output_shape(Shape input) const {
  for (const auto& l : layers_) input = l.spec().output_shape(input);
  return input;
}

void append(std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace bendlens
