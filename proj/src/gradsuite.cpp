#include "bendlens/gradsuite.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>

#include "bendlens/ae.hpp"
#include "bendlens/gmvae.hpp"
#include "bendlens/gradcheck.hpp"
#include "bendlens/layers.hpp"
#include "bendlens/ops.hpp"

namespace bendlens {
namespace {

Tensor normal_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Magnitudes at least 0.1, so relu and max-pool kinks sit far from any probe.
Tensor kink_free_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    const double mag = 0.1 + rng.uniform();
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor weighted_sum(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

using CaseFn = std::function<GradCheckResult(std::uint64_t seed, double eps)>;

struct Case {
  std::string name;
  CaseFn run;
};

Case layer_case(LayerSpec spec, Shape shape) {
  return {std::string("layer:") + std::string(to_string(spec.kind)),
          [spec, shape](std::uint64_t seed, double eps) {
            Rng rng(seed);
            Layer layer("l", spec, rng);
            const bool kinked = spec.kind == LayerKind::relu || spec.kind == LayerKind::maxpool2d;
            Tensor x = kinked ? kink_free_tensor(shape, rng) : normal_tensor(shape, rng);
            const Tensor w = normal_tensor(spec.output_shape(shape), rng, 1.0, false);
            auto wrt = layer.parameters();
            wrt.push_back({"input", x});
            return grad_check(
                [&] {
                  Rng r(seed + 100);
                  return weighted_sum(layer.forward(x, Mode::train, r), w);
                },
                wrt, eps);
          }};
}

GmvaeArchitecture tiny_gmvae() {
  GmvaeArchitecture a;
  a.channels = 2;
  a.side = 8;
  a.k = 3;
  a.latent = 4;
  a.classifier_hidden = 6;
  a.conv_channels = {2, 3};
  return a;
}

AeArchitecture tiny_ae() {
  AeArchitecture a;
  a.channels = 2;
  a.side = 8;
  a.block_channels = {2, 3};
  return a;
}

const std::vector<int> kTinyLabels{0, 1, 2, 0};

std::vector<Case> suite_cases() {
  std::vector<Case> cases = {
      layer_case(LayerSpec::dense(5, 3), {4, 5}),
      layer_case(LayerSpec::conv2d(2, 3, 3, 2, 1), {2, 2, 6, 6}),
      layer_case(LayerSpec::transposed_conv2d(3, 2, 3, 2, 1, 1), {2, 3, 3, 3}),
      layer_case(LayerSpec::batchnorm(2), {3, 2, 2, 3}),
      layer_case(LayerSpec::relu(), {3, 4}),
      layer_case(LayerSpec::sigmoid(), {3, 4}),
      layer_case(LayerSpec::dropout(0.3), {4, 6}),
      layer_case(LayerSpec::maxpool2d(2), {2, 2, 4, 4}),
  };
  cases.push_back({"op:upsample_nearest", [](std::uint64_t seed, double eps) {
                     Rng rng(seed);
                     Tensor x = normal_tensor({2, 2, 3, 3}, rng);
                     const Tensor w = normal_tensor({2, 2, 6, 6}, rng, 1.0, false);
                     return grad_check([&] { return weighted_sum(ops::upsample_nearest(x, 2), w); },
                                       {{"input", x}}, eps);
                   }});
  cases.push_back({"op:gumbel_softmax", [](std::uint64_t seed, double eps) {
                     Rng rng(seed);
                     Tensor logits = normal_tensor({3, 4}, rng);
                     const Tensor g = normal_tensor({3, 4}, rng, 1.0, false);
                     const Tensor w = normal_tensor({3, 4}, rng, 1.0, false);
                     return grad_check(
                         [&] { return weighted_sum(gumbel_softmax(logits, g, 0.5), w); },
                         {{"logits", logits}}, eps);
                   }});
  cases.push_back({"loss:kl_gaussian", [](std::uint64_t seed, double eps) {
                     Rng rng(seed);
                     Tensor mq = normal_tensor({3, 5}, rng), lq = normal_tensor({3, 5}, rng, 0.5);
                     Tensor mp = normal_tensor({3, 5}, rng), lp = normal_tensor({3, 5}, rng, 0.5);
                     return grad_check([&] { return kl_gaussian_diag(mq, lq, mp, lp); },
                                       {{"mu_q", mq}, {"logvar_q", lq}, {"mu_p", mp}, {"logvar_p", lp}},
                                       eps);
                   }});
  cases.push_back({"loss:kl_categorical", [](std::uint64_t seed, double eps) {
                     Rng rng(seed);
                     Tensor logits = normal_tensor({4, 5}, rng);
                     return grad_check([&] { return kl_categorical_uniform(logits); },
                                       {{"logits", logits}}, eps);
                   }});
  cases.push_back({"loss:reconstruction", [](std::uint64_t seed, double eps) {
                     Rng rng(seed);
                     const Tensor x = uniform_tensor({3, 7}, rng, 0.0, 1.0, false);
                     Tensor mu = uniform_tensor({3, 7}, rng, 0.05, 0.95);
                     return grad_check([&] { return reconstruction_term(x, mu); }, {{"mu_x", mu}},
                                       eps);
                   }});
  cases.push_back({"loss:label_nll", [](std::uint64_t seed, double eps) {
                     Rng rng(seed);
                     Tensor logits = normal_tensor({4, 3}, rng);
                     return grad_check([&] { return label_nll(logits, kTinyLabels); },
                                       {{"logits", logits}}, eps);
                   }});
  cases.push_back({"loss:triplet", [](std::uint64_t seed, double eps) {
                     Rng rng(seed);
                     Tensor emb = normal_tensor({6, 3}, rng);
                     const std::vector<int> labels{0, 1, 0, 1, 2, 2};
                     return grad_check([&] { return triplet_loss(emb, labels, 4.0); },
                                       {{"embeddings", emb}}, eps);
                   }});
  cases.push_back({"objective:gmvae", [](std::uint64_t seed, double eps) {
                     const auto arch = tiny_gmvae();
                     GmvaeModel model(arch, seed);
                     Rng rng(mix_seed(seed, 1));
                     const std::size_t b = kTinyLabels.size();
                     const Tensor y = normal_tensor({b, arch.channels, arch.side, arch.side}, rng,
                                                    1.0, false);
                     const Tensor x = uniform_tensor({b, arch.pixels()}, rng, 0.0, 1.0, false);
                     EncodeNoise noise{normal_tensor({b, arch.k}, rng, 1.0, false),
                                       normal_tensor({b, arch.latent}, rng, 1.0, false)};
                     GmvaeHyper hyper;
                     return grad_check(
                         [&] {
                           Rng r(mix_seed(seed, 2));
                           return total_loss(model, y, x, kTinyLabels, hyper, hyper.tau, r, &noise)
                               .loss;
                         },
                         without_shadowed_biases(model.parameters(), model.layers()), eps, 6);
                   }});
  cases.push_back({"objective:ae", [](std::uint64_t seed, double eps) {
                     const auto arch = tiny_ae();
                     AeModel model(arch, seed);
                     Rng rng(mix_seed(seed, 1));
                     const Tensor y =
                         normal_tensor({4, arch.channels, arch.side, arch.side}, rng, 1.0, false);
                     const Tensor x =
                         uniform_tensor({4, arch.side * arch.side}, rng, 0.0, 1.0, false);
                     return grad_check(
                         [&] {
                           Rng r(mix_seed(seed, 2));
                           return ops::mean(ops::square(ops::sub(model.forward(y, Mode::train, r), x)));
                         },
                         without_shadowed_biases(model.parameters(), model.layers()), eps, 6);
                   }});
  cases.push_back({"objective:cae", [](std::uint64_t seed, double eps) {
                     CaeArchitecture arch;
                     arch.side = 8;
                     arch.k = 3;
                     arch.conv_channels = {2, 3};
                     arch.hidden = 6;
                     CaeModel model(arch, seed);
                     Rng rng(mix_seed(seed, 1));
                     const Tensor images = uniform_tensor({4, 64}, rng, 0.0, 1.0, false);
                     return grad_check(
                         [&] {
                           Rng r(mix_seed(seed, 2));
                           return label_nll(model.forward(images, Mode::train, r), kTinyLabels);
                         },
                         without_shadowed_biases(model.parameters(), model.layers()), eps, 6);
                   }});
  return cases;
}

}  // namespace

std::vector<NamedTensor> without_shadowed_biases(std::vector<NamedTensor> params,
                                                 const std::vector<const Layer*>& forward_order) {
  std::set<std::string> shadowed;
  for (std::size_t i = 0; i + 1 < forward_order.size(); ++i) {
    if (forward_order[i + 1]->spec().kind == LayerKind::batchnorm) {
      shadowed.insert(forward_order[i]->name() + ".bias");
    }
  }
  std::erase_if(params, [&](const NamedTensor& p) { return shadowed.count(p.name) > 0; });
  return params;
}

std::vector<GradSuiteRow> run_gradient_suite(const GradSuiteOptions& options) {
  std::vector<GradSuiteRow> rows;
  for (const auto& c : suite_cases()) {
    GradSuiteRow row{c.name, options.seeds, 0, 0.0, false};
    for (std::uint64_t seed = 0; seed < options.seeds; ++seed) {
      const auto r = c.run(seed, options.eps);
      row.max_error = std::max(row.max_error, r.max_error);
      row.checked += r.checked;
    }
    row.pass = row.max_error <= options.tolerance;
    rows.push_back(row);
  }
  return rows;
}

std::string format_gradient_table(const std::vector<GradSuiteRow>& rows, double tolerance) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-26s %6s %8s %12s  %s\n", "check", "seeds", "entries",
                "max_rel_err", "result");
  os << line;
  bool all = true;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-26s %6zu %8zu %12.3e  %s\n", r.name.c_str(), r.seeds,
                  r.checked, r.max_error, r.pass ? "PASS" : "FAIL");
    os << line;
    all = all && r.pass;
  }
  std::snprintf(line, sizeof line, "overall (tolerance %.0e): %s\n", tolerance,
                all ? "PASS" : "FAIL");
  os << line;
  return os.str();
}

}  // namespace bendlens
