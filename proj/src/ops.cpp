#include "bendlens/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

namespace bendlens::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using AlignedMap = Eigen::Map<const RowMat, Eigen::Aligned64>;

// Eigen picks scalar or packet (fused multiply-add) code per element from
// the operand addresses, so products only see 64-byte aligned storage;
// otherwise results would depend on where the allocator put a buffer.
class Operand {
 public:
  Operand(const double* p, Eigen::Index rows, Eigen::Index cols) : rows_(rows), cols_(cols) {
    if (reinterpret_cast<std::uintptr_t>(p) % 64 == 0) {
      ptr_ = p;
    } else {
      copy_ = ConstMatMap(p, rows, cols);
      ptr_ = copy_.data();
    }
  }
  AlignedMap map() const { return AlignedMap(ptr_, rows_, cols_); }

 private:
  RowMat copy_;
  const double* ptr_ = nullptr;
  Eigen::Index rows_, cols_;
};

void add_into(double* dst, const RowMat& m) {
  const double* src = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += src[i];
}

std::vector<double> to_vector(const RowMat& m) { return {m.data(), m.data() + m.size()}; }

using detail::Node;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

// Gradient buffer of the i-th parent, or nullptr if it takes no gradient.
double* parent_grad(Node& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

const double* parent_value(Node& self, std::size_t i) { return self.parents[i]->value.data(); }

template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF df) {
  const auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result(a.shape(), std::move(out), {a}, [df](Node& self) {
    double* ga = parent_grad(self, 0);
    if (!ga) return;
    const double* x = parent_value(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i] * df(x[i], self.value[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (double* g = parent_grad(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const double* x = parent_value(self, 0);
    const double* y = parent_value(self, 1);
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const double* y = parent_value(self, 1);
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / y[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] -= self.grad[i] * self.value[i] / y[i];
      }
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return factor * x; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor add_rowwise(const Tensor& a, const Tensor& row) {
  require_rank("add_rowwise", a, 2);
  if (row.size() != a.dim(1)) {
    throw ShapeError("add_rowwise: row of shape " + shape_str(row.shape()) +
                     " does not match " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(0), f = a.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) out[i * f + j] = a.data()[i * f + j] + row.data()[j];
  }
  return make_result(a.shape(), std::move(out), {a, row}, [n, f](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n * f; ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < f; ++j) g[j] += self.grad[i * f + j];
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s}, {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor row_sum(const Tensor& a) {
  require_rank("row_sum", a, 2);
  const std::size_t n = a.dim(0), f = a.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f; ++j) out[i] += a.data()[i * f + j];
  }
  return make_result({n}, std::move(out), {a}, [n, f](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < f; ++j) g[i * f + j] += self.grad[i];
      }
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor flatten(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("flatten: empty shape");
  return reshape(a, {a.dim(0), a.size() / a.dim(0)});
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank("concat_cols", a, 2);
  require_rank("concat_cols", b, 2);
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), fa = a.dim(1), fb = b.dim(1), f = fa + fb;
  std::vector<double> out(n * f);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * fa, fa, out.begin() + i * f);
    std::copy_n(b.data().begin() + i * fb, fb, out.begin() + i * f + fa);
  }
  return make_result({n, f}, std::move(out), {a, b}, [n, fa, fb, f](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < fa; ++j) g[i * fa + j] += self.grad[i * f + j];
      }
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < fb; ++j) g[i * fb + j] += self.grad[i * f + fa + j];
      }
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const auto n = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto m = static_cast<Eigen::Index>(b.dim(1));
  const RowMat prod =
      Operand(a.data().data(), n, k).map() * Operand(b.data().data(), k, m).map();
  return make_result({a.dim(0), b.dim(1)}, to_vector(prod), {a, b}, [n, k, m](Node& self) {
    const Operand gout(self.grad.data(), n, m);
    if (double* g = parent_grad(self, 0)) {
      add_into(g, gout.map() * Operand(parent_value(self, 1), k, m).map().transpose());
    }
    if (double* g = parent_grad(self, 1)) {
      add_into(g, Operand(parent_value(self, 0), n, k).map().transpose() * gout.map());
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  if (x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != weight.dim(0)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const auto n = static_cast<Eigen::Index>(x.dim(0));
  const auto in = static_cast<Eigen::Index>(x.dim(1));
  const auto out_f = static_cast<Eigen::Index>(weight.dim(0));
  RowMat y = Operand(x.data().data(), n, in).map() *
             Operand(weight.data().data(), out_f, in).map().transpose();
  if (has_bias) {
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), out_f);
  }
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result({x.dim(0), weight.dim(0)}, to_vector(y), std::move(inputs),
                     [n, in, out_f, has_bias](Node& self) {
                       const Operand gy(self.grad.data(), n, out_f);
                       if (double* g = parent_grad(self, 0)) {
                         add_into(g, gy.map() * Operand(parent_value(self, 1), out_f, in).map());
                       }
                       if (double* g = parent_grad(self, 1)) {
                         add_into(g, gy.map().transpose() *
                                         Operand(parent_value(self, 0), n, in).map());
                       }
                       if (has_bias) {
                         if (double* g = parent_grad(self, 2)) {
                           for (Eigen::Index i = 0; i < n; ++i) {
                             const double* row = self.grad.data() + i * out_f;
                             for (Eigen::Index j = 0; j < out_f; ++j) g[j] += row[j];
                           }
                         }
                       }
                     });
}

Tensor softmax_rows(const Tensor& a) {
  require_rank("softmax_rows", a, 2);
  const std::size_t n = a.dim(0), k = a.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = a.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (out[i * k + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= z;
  }
  return make_result(a.shape(), std::move(out), {a}, [n, k](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < n; ++i) {
      const double* y = self.value.data() + i * k;
      const double* gy = self.grad.data() + i * k;
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < k; ++j) g[i * k + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  require_rank("log_softmax_rows", a, 2);
  const std::size_t n = a.dim(0), k = a.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = a.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
  }
  return make_result(a.shape(), std::move(out), {a}, [n, k](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < n; ++i) {
      const double* y = self.value.data() + i * k;
      const double* gy = self.grad.data() + i * k;
      double total = 0.0;
      for (std::size_t j = 0; j < k; ++j) total += gy[j];
      for (std::size_t j = 0; j < k; ++j) g[i * k + j] += gy[j] - std::exp(y[j]) * total;
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution machinery

std::size_t conv_output_extent(std::size_t in, const ConvGeometry& g) {
  const auto padded = static_cast<long long>(in + 2 * g.padding);
  const auto k = static_cast<long long>(g.kernel);
  if (g.stride == 0 || g.kernel == 0 || padded < k) return 0;
  return static_cast<std::size_t>((padded - k) / static_cast<long long>(g.stride) + 1);
}

std::size_t transposed_conv_output_extent(std::size_t in, const ConvGeometry& g) {
  const auto full = static_cast<long long>((in - 1) * g.stride + g.kernel + g.output_padding);
  const auto out = full - 2 * static_cast<long long>(g.padding);
  return out > 0 ? static_cast<std::size_t>(out) : 0;
}

namespace {

struct PatchLayout {
  std::size_t batch, channels, height, width;  // the "image" side
  std::size_t out_h, out_w;                    // patch grid
  ConvGeometry geo;

  std::size_t rows() const { return batch * out_h * out_w; }
  std::size_t cols() const { return channels * geo.kernel * geo.kernel; }
};

// image (B, C, H, W) -> patches (B*Ho*Wo, C*k*k); out-of-range taps are zero.
std::vector<double> im2col(const double* image, const PatchLayout& L) {
  const std::size_t k = L.geo.kernel;
  std::vector<double> cols(L.rows() * L.cols(), 0.0);
  const auto pad = static_cast<long long>(L.geo.padding);
  for (std::size_t b = 0; b < L.batch; ++b) {
    for (std::size_t oy = 0; oy < L.out_h; ++oy) {
      for (std::size_t ox = 0; ox < L.out_w; ++ox) {
        double* dst = cols.data() + ((b * L.out_h + oy) * L.out_w + ox) * L.cols();
        for (std::size_t c = 0; c < L.channels; ++c) {
          const double* plane = image + (b * L.channels + c) * L.height * L.width;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long long iy = static_cast<long long>(oy * L.geo.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<long long>(L.height)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long long ix = static_cast<long long>(ox * L.geo.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<long long>(L.width)) continue;
              dst[(c * k + ky) * k + kx] = plane[iy * static_cast<long long>(L.width) + ix];
            }
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatters patch values back, accumulating into image.
void col2im(const double* cols, const PatchLayout& L, double* image) {
  const std::size_t k = L.geo.kernel;
  const auto pad = static_cast<long long>(L.geo.padding);
  for (std::size_t b = 0; b < L.batch; ++b) {
    for (std::size_t oy = 0; oy < L.out_h; ++oy) {
      for (std::size_t ox = 0; ox < L.out_w; ++ox) {
        const double* src = cols + ((b * L.out_h + oy) * L.out_w + ox) * L.cols();
        for (std::size_t c = 0; c < L.channels; ++c) {
          double* plane = image + (b * L.channels + c) * L.height * L.width;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long long iy = static_cast<long long>(oy * L.geo.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<long long>(L.height)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long long ix = static_cast<long long>(ox * L.geo.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<long long>(L.width)) continue;
              plane[iy * static_cast<long long>(L.width) + ix] += src[(c * k + ky) * k + kx];
            }
          }
        }
      }
    }
  }
}

// (B*P, C) row matrix <-> (B, C, P) channel planes.
std::vector<double> rows_to_planes(const double* rows, std::size_t batch, std::size_t channels,
                                   std::size_t plane) {
  std::vector<double> out(batch * channels * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double* r = rows + (b * plane + p) * channels;
      for (std::size_t c = 0; c < channels; ++c) out[(b * channels + c) * plane + p] = r[c];
    }
  }
  return out;
}

std::vector<double> planes_to_rows(const double* planes, std::size_t batch, std::size_t channels,
                                   std::size_t plane) {
  std::vector<double> out(batch * channels * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* src = planes + (b * channels + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[(b * plane + p) * channels + c] = src[p];
    }
  }
  return out;
}

void check_conv_args(const char* op, const Tensor& x, const Tensor& weight, const Tensor& bias,
                     std::size_t in_channels_axis, std::size_t out_channels_axis,
                     const ConvGeometry& g) {
  require_rank(op, x, 4);
  require_rank(op, weight, 4);
  if (g.kernel == 0 || g.stride == 0) throw ShapeError(std::string(op) + ": kernel and stride must be positive");
  if (weight.dim(2) != g.kernel || weight.dim(3) != g.kernel) {
    throw ShapeError(std::string(op) + ": weight " + shape_str(weight.shape()) +
                     " does not match kernel " + std::to_string(g.kernel));
  }
  if (x.dim(1) != weight.dim(in_channels_axis)) {
    throw ShapeError(std::string(op) + ": input " + shape_str(x.shape()) +
                     " has wrong channel count for weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && bias.size() != weight.dim(out_channels_axis)) {
    throw ShapeError(std::string(op) + ": bias " + shape_str(bias.shape()) +
                     " does not match weight " + shape_str(weight.shape()));
  }
}

void add_channel_bias(std::vector<double>& out, const Tensor& bias, std::size_t batch,
                      std::size_t channels, std::size_t plane) {
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double v = bias.data()[c];
      double* dst = out.data() + (b * channels + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += v;
    }
  }
}

void accumulate_channel_bias_grad(const std::vector<double>& grad, double* gb, std::size_t batch,
                                  std::size_t channels, std::size_t plane) {
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* src = grad.data() + (b * channels + c) * plane;
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += src[p];
      gb[c] += s;
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g) {
  check_conv_args("conv2d", x, weight, bias, 1, 0, g);
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0);
  const std::size_t oh = conv_output_extent(h, g), ow = conv_output_extent(w, g);
  if (oh == 0 || ow == 0) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small for kernel " +
                     std::to_string(g.kernel));
  }
  const PatchLayout layout{batch, cin, h, w, oh, ow, g};
  auto cols = std::make_shared<std::vector<double>>(im2col(x.data().data(), layout));
  const auto rows = static_cast<Eigen::Index>(layout.rows());
  const auto kk = static_cast<Eigen::Index>(layout.cols());
  const auto co = static_cast<Eigen::Index>(cout);

  RowMat out_rows = Operand(cols->data(), rows, kk).map() *
                    Operand(weight.data().data(), co, kk).map().transpose();
  auto out = rows_to_planes(out_rows.data(), batch, cout, oh * ow);
  const bool has_bias = bias.defined();
  if (has_bias) add_channel_bias(out, bias, batch, cout, oh * ow);

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(
      {batch, cout, oh, ow}, std::move(out), std::move(inputs),
      [layout, cols, rows, kk, co, has_bias](Node& self) {
        const std::size_t plane = layout.out_h * layout.out_w;
        auto grad_rows = planes_to_rows(self.grad.data(), layout.batch,
                                        static_cast<std::size_t>(co), plane);
        const Operand gy(grad_rows.data(), rows, co);
        if (double* gw = parent_grad(self, 1)) {
          add_into(gw, gy.map().transpose() * Operand(cols->data(), rows, kk).map());
        }
        if (double* gx = parent_grad(self, 0)) {
          RowMat gcols = gy.map() * Operand(parent_value(self, 1), co, kk).map();
          col2im(gcols.data(), layout, gx);
        }
        if (has_bias) {
          if (double* gb = parent_grad(self, 2)) {
            accumulate_channel_bias_grad(self.grad, gb, layout.batch,
                                         static_cast<std::size_t>(co), plane);
          }
        }
      });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        const ConvGeometry& g) {
  check_conv_args("conv_transpose2d", x, weight, bias, 0, 1, g);
  if (g.output_padding >= g.stride) {
    throw ShapeError("conv_transpose2d: output_padding must be smaller than stride");
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(1);
  const std::size_t oh = transposed_conv_output_extent(h, g);
  const std::size_t ow = transposed_conv_output_extent(w, g);
  if (oh == 0 || ow == 0) {
    throw ShapeError("conv_transpose2d: non-positive output for input " + shape_str(x.shape()));
  }
  // The output plays the role of the convolution's input; patches over it
  // line up one-to-one with input pixels.
  const PatchLayout layout{batch, cout, oh, ow, h, w, g};
  const auto rows = static_cast<Eigen::Index>(layout.rows());
  const auto kk = static_cast<Eigen::Index>(layout.cols());
  const auto ci = static_cast<Eigen::Index>(cin);

  auto x_rows = std::make_shared<std::vector<double>>(
      planes_to_rows(x.data().data(), batch, cin, h * w));
  RowMat cols =
      Operand(x_rows->data(), rows, ci).map() * Operand(weight.data().data(), ci, kk).map();
  std::vector<double> out(batch * cout * oh * ow, 0.0);
  col2im(cols.data(), layout, out.data());
  const bool has_bias = bias.defined();
  if (has_bias) add_channel_bias(out, bias, batch, cout, oh * ow);

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(
      {batch, cout, oh, ow}, std::move(out), std::move(inputs),
      [layout, x_rows, rows, kk, ci, has_bias](Node& self) {
        auto gcols = im2col(self.grad.data(), layout);
        const Operand gc(gcols.data(), rows, kk);
        if (double* gw = parent_grad(self, 1)) {
          add_into(gw, Operand(x_rows->data(), rows, ci).map().transpose() * gc.map());
        }
        if (double* gx = parent_grad(self, 0)) {
          RowMat gx_rows = gc.map() * Operand(parent_value(self, 1), ci, kk).map().transpose();
          auto planes = rows_to_planes(gx_rows.data(), layout.batch, static_cast<std::size_t>(ci),
                                       layout.out_h * layout.out_w);
          for (std::size_t i = 0; i < planes.size(); ++i) gx[i] += planes[i];
        }
        if (has_bias) {
          if (double* gb = parent_grad(self, 2)) {
            accumulate_channel_bias_grad(self.grad, gb, layout.batch, layout.channels,
                                         layout.height * layout.width);
          }
        }
      });
}

Tensor max_pool2d(const Tensor& x, std::size_t window) {
  require_rank("max_pool2d", x, 4);
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window == 0 || h % window != 0 || w % window != 0) {
    throw ShapeError("max_pool2d: window " + std::to_string(window) + " does not tile " +
                     shape_str(x.shape()));
  }
  const std::size_t oh = h / window, ow = w / window;
  std::vector<double> out(batch * c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const double* in = x.data().data();
  for (std::size_t plane = 0; plane < batch * c; ++plane) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = plane * h * w + oy * window * w + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = plane * h * w + (oy * window + dy) * w + ox * window + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = in[best];
        (*argmax)[o] = best;
      }
    }
  }
  return make_result({batch, c, oh, ow}, std::move(out), {x}, [argmax](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*argmax)[o]] += self.grad[o];
    }
  });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  require_rank("upsample_nearest", x, 4);
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<double> out(batch * c * oh * ow);
  for (std::size_t plane = 0; plane < batch * c; ++plane) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        out[(plane * oh + oy) * ow + ox] = x.data()[(plane * h + oy / factor) * w + ox / factor];
      }
    }
  }
  return make_result({batch, c, oh, ow}, std::move(out), {x},
                     [batch, c, h, w, oh, ow, factor](Node& self) {
                       double* g = parent_grad(self, 0);
                       if (!g) return;
                       for (std::size_t plane = 0; plane < batch * c; ++plane) {
                         for (std::size_t oy = 0; oy < oh; ++oy) {
                           for (std::size_t ox = 0; ox < ow; ++ox) {
                             g[(plane * h + oy / factor) * w + ox / factor] +=
                                 self.grad[(plane * oh + oy) * ow + ox];
                           }
                         }
                       }
                     });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double momentum, double eps) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("batch_norm: expected (N, F) or (N, C, H, W), got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
      running_var.size() != c) {
    throw ShapeError("batch_norm: parameters of size " + std::to_string(gamma.size()) +
                     " do not match input " + shape_str(x.shape()));
  }
  const std::size_t count = n * spatial;
  if (training && count < 2) {
    throw ShapeError("batch_norm: training mode needs more than one value per channel, got " +
                     shape_str(x.shape()));
  }
  const double* in = x.data().data();
  auto at = [&](std::size_t b, std::size_t ch, std::size_t p) {
    return (b * c + ch) * spatial + p;
  };

  std::vector<double> mu(c), inv_std(c);
  if (training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < spatial; ++p) s += in[at(b, ch, p)];
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < spatial; ++p) {
          const double d = in[at(b, ch, p)] - m;
          v += d * d;
        }
      const double biased = v / static_cast<double>(count);
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(biased + eps);
      rm[ch] = (1.0 - momentum) * rm[ch] + momentum * m;
      rv[ch] = (1.0 - momentum) * rv[ch] + momentum * v / static_cast<double>(count - 1);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean.data()[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var.data()[ch] + eps);
    }
  }

  auto xhat = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double g = gamma.data()[ch], bt = beta.data()[ch];
      for (std::size_t p = 0; p < spatial; ++p) {
        const std::size_t i = at(b, ch, p);
        (*xhat)[i] = (in[i] - mu[ch]) * inv_std[ch];
        out[i] = g * (*xhat)[i] + bt;
      }
    }
  }

  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [xhat, inv_std, n, c, spatial, count, training](Node& self) {
                       auto at = [&](std::size_t b, std::size_t ch, std::size_t p) {
                         return (b * c + ch) * spatial + p;
                       };
                       const double* gamma_v = parent_value(self, 1);
                       double* gx = parent_grad(self, 0);
                       double* gg = parent_grad(self, 1);
                       double* gb = parent_grad(self, 2);
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (std::size_t b = 0; b < n; ++b)
                           for (std::size_t p = 0; p < spatial; ++p) {
                             const std::size_t i = at(b, ch, p);
                             sum_dy += self.grad[i];
                             sum_dy_xhat += self.grad[i] * (*xhat)[i];
                           }
                         if (gg) gg[ch] += sum_dy_xhat;
                         if (gb) gb[ch] += sum_dy;
                         if (!gx) continue;
                         const double scale = gamma_v[ch] * inv_std[ch];
                         if (!training) {
                           for (std::size_t b = 0; b < n; ++b)
                             for (std::size_t p = 0; p < spatial; ++p) {
                               const std::size_t i = at(b, ch, p);
                               gx[i] += scale * self.grad[i];
                             }
                           continue;
                         }
                         const double inv_count = 1.0 / static_cast<double>(count);
                         for (std::size_t b = 0; b < n; ++b)
                           for (std::size_t p = 0; p < spatial; ++p) {
                             const std::size_t i = at(b, ch, p);
                             gx[i] += scale * (self.grad[i] - inv_count * sum_dy -
                                               (*xhat)[i] * inv_count * sum_dy_xhat);
                           }
                       }
                     });
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = x.data()[i] * (*mask)[i];
  }
  return make_result(x.shape(), std::move(out), {x}, [mask](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
    }
  });
}

}  // namespace bendlens::ops
