#include "bendlens/gmvae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "bendlens/adam.hpp"
#include "bendlens/binary_io.hpp"
#include "bendlens/checkpoint.hpp"
#include "bendlens/ops.hpp"

namespace bendlens {
namespace {

using detail::Node;

double* grad_of(Node& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

void require_finite(double value, const char* term) {
  if (!std::isfinite(value)) {
    throw DivergenceError(std::string("non-finite ") + term + " term (" + std::to_string(value) +
                          ")");
  }
}

Tensor one_hot_argmax(const Tensor& logits) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(b * k, 0.0);
  const auto v = logits.data();
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = v.subspan(i * k, k);
    out[i * k + static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())] =
        1.0;
  }
  return Tensor({b, k}, std::move(out));
}

}  // namespace

Tensor gumbel_softmax(const Tensor& logits, const Tensor& gumbel_noise, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: temperature must be positive");
  return ops::softmax_rows(ops::scale(ops::add(logits, gumbel_noise), 1.0 / tau));
}

Tensor gumbel_softmax_sample(const Tensor& logits, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: temperature must be positive");
  std::vector<double> g(logits.size());
  for (auto& v : g) v = rng.gumbel();
  return gumbel_softmax(logits, Tensor(logits.shape(), std::move(g)), tau);
}

Tensor kl_gaussian_diag(const Tensor& mu_q, const Tensor& logvar_q, const Tensor& mu_p,
                        const Tensor& logvar_p) {
  const double batch = static_cast<double>(mu_q.dim(0));
  const Tensor ratio = ops::div(ops::add(ops::exp(logvar_q), ops::square(ops::sub(mu_q, mu_p))),
                                ops::exp(logvar_p));
  const Tensor per_entry = ops::add_scalar(ops::add(ops::sub(logvar_p, logvar_q), ratio), -1.0);
  return ops::scale(ops::sum(per_entry), 0.5 / batch);
}

double kl_gaussian_diag(std::span<const double> mu_q, std::span<const double> var_q,
                        std::span<const double> mu_p, std::span<const double> var_p) {
  const std::size_t d = mu_q.size();
  if (var_q.size() != d || mu_p.size() != d || var_p.size() != d) {
    throw std::invalid_argument("kl_gaussian_diag: length mismatch");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    if (!(var_q[i] > 0.0) || !(var_p[i] > 0.0)) {
      throw std::invalid_argument("kl_gaussian_diag: variances must be positive");
    }
    const double diff = mu_q[i] - mu_p[i];
    kl += std::log(var_p[i] / var_q[i]) + (var_q[i] + diff * diff) / var_p[i] - 1.0;
  }
  return 0.5 * kl;
}

Tensor kl_categorical_uniform(const Tensor& logits) {
  const double batch = static_cast<double>(logits.dim(0));
  const double log_k = std::log(static_cast<double>(logits.dim(1)));
  const Tensor p = ops::softmax_rows(logits);
  const Tensor log_kp = ops::add_scalar(ops::log_softmax_rows(logits), log_k);
  return ops::scale(ops::sum(ops::mul(p, log_kp)), 1.0 / batch);
}

double kl_categorical_uniform(std::span<const double> probabilities) {
  const double k = static_cast<double>(probabilities.size());
  double kl = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) kl += p * std::log(k * p);
  }
  return kl;
}

Tensor reconstruction_term(const Tensor& x, const Tensor& mu_x) {
  const double batch = static_cast<double>(x.dim(0));
  return ops::scale(ops::sum(ops::square(ops::sub(x, mu_x))), -0.5 / batch);
}

double reconstruction_term(std::span<const double> x, std::span<const double> mu_x) {
  if (x.size() != mu_x.size()) throw std::invalid_argument("reconstruction_term: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - mu_x[i]) * (x[i] - mu_x[i]);
  return -0.5 * acc;
}

Tensor label_nll(const Tensor& logits, std::span<const int> labels) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b) throw ShapeError("label_nll: label count does not match the batch");
  const Tensor mask({b, k}, one_hot_rows(labels, k));
  return ops::scale(ops::sum(ops::mul(ops::log_softmax_rows(logits), mask)),
                    -1.0 / static_cast<double>(b));
}

Tensor triplet_loss(const Tensor& embeddings, std::span<const int> labels, double margin,
                    std::size_t* single_class_batches) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw ShapeError("triplet_loss: expected (" + std::to_string(labels.size()) +
                     ", d) embeddings, got " + shape_str(embeddings.shape()));
  }
  const std::size_t b = labels.size(), d = embeddings.dim(1);
  const std::set<int> classes(labels.begin(), labels.end());
  if (classes.size() < 2) {
    if (single_class_batches) ++*single_class_batches;
    return make_result({1}, {0.0}, {embeddings}, [](Node&) {});
  }
  const auto e = embeddings.data();
  std::vector<double> dist(b * b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = e[i * d + t] - e[j * d + t];
        acc += diff * diff;
      }
      dist[i * b + j] = dist[j * b + i] = acc;
    }
  }
  // (anchor, hardest positive, hardest negative) for every active hinge.
  struct Active {
    std::size_t a, p, n;
  };
  std::vector<Active> active;
  double total = 0.0;
  std::size_t anchors = 0;
  for (std::size_t a = 0; a < b; ++a) {
    std::size_t p = b, n = b;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (p == b || dist[a * b + j] > dist[a * b + p]) p = j;
      } else if (n == b || dist[a * b + j] < dist[a * b + n]) {
        n = j;
      }
    }
    if (p == b) continue;
    ++anchors;
    const double hinge = dist[a * b + p] - dist[a * b + n] + margin;
    if (hinge > 0.0) {
      total += hinge;
      active.push_back({a, p, n});
    }
  }
  if (anchors == 0) return make_result({1}, {0.0}, {embeddings}, [](Node&) {});
  const double inv = 1.0 / static_cast<double>(anchors);
  return make_result({1}, {total * inv}, {embeddings}, [active, inv, d](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    const double* e = self.parents[0]->value.data();
    const double s = self.grad[0] * inv;
    for (const auto& t : active) {
      for (std::size_t k = 0; k < d; ++k) {
        const double ea = e[t.a * d + k], ep = e[t.p * d + k], en = e[t.n * d + k];
        // d/d e of ||a - p||^2 - ||a - n||^2
        g[t.a * d + k] += s * 2.0 * (en - ep);
        g[t.p * d + k] += s * -2.0 * (ea - ep);
        g[t.n * d + k] += s * 2.0 * (ea - en);
      }
    }
  });
}

// ---------------------------------------------------------------------------

void GmvaeArchitecture::validate() const {
  if (channels == 0 || k < 2 || latent == 0 || classifier_hidden == 0 || conv_channels.empty()) {
    throw std::invalid_argument("gmvae architecture: channels, latent and hidden must be positive "
                                "and k >= 2");
  }
  if (side == 0 || side % (std::size_t{1} << conv_channels.size()) != 0) {
    throw std::invalid_argument("gmvae architecture: side " + std::to_string(side) +
                                " is not divisible by 2^" + std::to_string(conv_channels.size()));
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("gmvae architecture: dropout must be in [0, 1)");
  }
}

std::string_view to_string(PriorConditioning p) {
  return p == PriorConditioning::label ? "label" : "sampled";
}

PriorConditioning parse_prior_conditioning(std::string_view text) {
  if (text == "label") return PriorConditioning::label;
  if (text == "sampled") return PriorConditioning::sampled;
  throw std::invalid_argument("unknown prior conditioning '" + std::string(text) + "'");
}

namespace {

GmvaeArchitecture checked(GmvaeArchitecture arch) {
  arch.validate();
  return arch;
}

}  // namespace

GmvaeModel::GmvaeModel(GmvaeArchitecture arch, std::uint64_t init_seed)
    : GmvaeModel(checked(std::move(arch)), Rng(mix_seed(init_seed, 0x676d7661))) {}

GmvaeModel::GmvaeModel(GmvaeArchitecture arch, Rng init)
    : arch_(std::move(arch)),
      encoder_("encoder"),
      classifier_("classifier"),
      inference_mu_("inference.mu", LayerSpec::dense(arch_.feature_size() + arch_.k, arch_.latent),
                    init),
      inference_logvar_("inference.logvar",
                        LayerSpec::dense(arch_.feature_size() + arch_.k, arch_.latent), init),
      prior_mu_("prior.mu", LayerSpec::dense(arch_.k, arch_.latent), init),
      prior_logvar_("prior.logvar", LayerSpec::dense(arch_.k, arch_.latent), init),
      decoder_head_("decoder.head"),
      decoder_body_("decoder.body"),
      decoder_out_("decoder.out",
                   LayerSpec::dense(arch_.channels * arch_.pixels(), arch_.pixels()), init) {
  std::size_t in = arch_.channels;
  for (auto out : arch_.conv_channels) {
    encoder_.add(LayerSpec::conv2d(in, out, 3, 2, 1), init)
        .add(LayerSpec::batchnorm(out), init)
        .add(LayerSpec::relu(), init);
    in = out;
  }
  classifier_.add(LayerSpec::dense(arch_.feature_size(), arch_.classifier_hidden), init)
      .add(LayerSpec::relu(), init)
      .add(LayerSpec::dropout(arch_.dropout), init)
      .add(LayerSpec::dense(arch_.classifier_hidden, arch_.k), init);
  decoder_head_.add(LayerSpec::dense(arch_.latent, arch_.feature_size()), init)
      .add(LayerSpec::relu(), init);
  // Mirror of the encoder, ending at the input channel count.
  const auto& ch = arch_.conv_channels;
  for (std::size_t i = ch.size(); i-- > 0;) {
    const std::size_t out = i == 0 ? arch_.channels : ch[i - 1];
    decoder_body_.add(LayerSpec::transposed_conv2d(ch[i], out, 3, 2, 1, 1), init)
        .add(LayerSpec::batchnorm(out), init)
        .add(LayerSpec::relu(), init);
  }
}

Tensor GmvaeModel::features(const Tensor& y, Mode mode, Rng& rng) {
  const Shape expected{y.rank() > 0 ? y.dim(0) : 0, arch_.channels, arch_.side, arch_.side};
  if (y.shape() != expected) {
    throw ShapeError("gmvae: expected measurements " + shape_str(expected) + ", got " +
                     shape_str(y.shape()));
  }
  return ops::flatten(encoder_.forward(y, mode, rng));
}

Tensor GmvaeModel::class_logits(const Tensor& feats, Mode mode, Rng& rng) {
  return classifier_.forward(feats, mode, rng);
}

std::pair<Tensor, Tensor> GmvaeModel::inference(const Tensor& feats, const Tensor& c, Mode mode,
                                                Rng& rng) {
  const Tensor h =
      ops::concat_cols(ops::dropout(feats, arch_.dropout, mode == Mode::train, rng), c);
  return {inference_mu_.forward(h, mode, rng),
          ops::clamp(inference_logvar_.forward(h, mode, rng), -kLogVarBound, kLogVarBound)};
}

std::pair<Tensor, Tensor> GmvaeModel::prior(const Tensor& c) {
  Rng unused(0);
  return {prior_mu_.forward(c, Mode::eval, unused),
          ops::clamp(prior_logvar_.forward(c, Mode::eval, unused), -kLogVarBound, kLogVarBound)};
}

Tensor GmvaeModel::decode(const Tensor& z, Mode mode, Rng& rng) {
  const std::size_t b = z.dim(0);
  const std::size_t bs = arch_.bottleneck_side();
  Tensor h = decoder_head_.forward(z, mode, rng);
  h = ops::reshape(h, {b, arch_.conv_channels.back(), bs, bs});
  h = ops::flatten(decoder_body_.forward(h, mode, rng));
  return ops::sigmoid(decoder_out_.forward(h, mode, rng));
}

EncodeResult GmvaeModel::encode(const Tensor& y, Mode mode, Rng& rng, const EncodeNoise* noise,
                                double tau) {
  EncodeResult r;
  const Tensor feats = features(y, mode, rng);
  r.logits = class_logits(feats, mode, rng);
  const std::size_t b = y.dim(0);
  if (mode == Mode::train) {
    r.c_tilde = noise ? gumbel_softmax(r.logits, noise->gumbel, tau)
                      : gumbel_softmax_sample(r.logits, tau, rng);
  } else {
    r.c_tilde = one_hot_argmax(r.logits);
  }
  std::tie(r.mu, r.logvar) = inference(feats, r.c_tilde, mode, rng);
  if (mode == Mode::train) {
    Tensor eps;
    if (noise) {
      eps = noise->epsilon;
    } else {
      std::vector<double> v(b * arch_.latent);
      for (auto& x : v) x = rng.normal();
      eps = Tensor({b, arch_.latent}, std::move(v));
    }
    r.z = ops::add(r.mu, ops::mul(ops::exp(ops::scale(r.logvar, 0.5)), eps));
  } else {
    r.z = r.mu;
  }
  return r;
}

std::vector<NamedTensor> GmvaeModel::parameters() const {
  std::vector<NamedTensor> out = encoder_.parameters();
  append(out, classifier_.parameters());
  append(out, inference_mu_.parameters());
  append(out, inference_logvar_.parameters());
  append(out, prior_mu_.parameters());
  append(out, prior_logvar_.parameters());
  append(out, decoder_head_.parameters());
  append(out, decoder_body_.parameters());
  append(out, decoder_out_.parameters());
  return out;
}

std::vector<const Layer*> GmvaeModel::layers() const {
  std::vector<const Layer*> out;
  for (const auto& l : encoder_.layers()) out.push_back(&l);
  for (const auto& l : classifier_.layers()) out.push_back(&l);
  for (const Layer* l : {&inference_mu_, &inference_logvar_, &prior_mu_, &prior_logvar_}) {
    out.push_back(l);
  }
  for (const auto& l : decoder_head_.layers()) out.push_back(&l);
  for (const auto& l : decoder_body_.layers()) out.push_back(&l);
  out.push_back(&decoder_out_);
  return out;
}

std::vector<NamedTensor> GmvaeModel::state() const {
  std::vector<NamedTensor> out = encoder_.state();
  append(out, classifier_.state());
  append(out, inference_mu_.state());
  append(out, inference_logvar_.state());
  append(out, prior_mu_.state());
  append(out, prior_logvar_.state());
  append(out, decoder_head_.state());
  append(out, decoder_body_.state());
  append(out, decoder_out_.state());
  return out;
}

std::vector<double> one_hot_rows(std::span<const int> labels, std::size_t k) {
  std::vector<double> out(labels.size() * k, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " outside [0, " +
                                  std::to_string(k) + ")");
    }
    out[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return out;
}

LossBreakdown total_loss(GmvaeModel& model, const Tensor& y, const Tensor& x,
                         std::span<const int> labels, const GmvaeHyper& hyper, double tau,
                         Rng& rng, const EncodeNoise* noise, std::size_t* single_class_batches) {
  const auto& arch = model.architecture();
  const std::size_t b = y.dim(0);
  if (x.rank() != 2 || x.dim(0) != b || x.dim(1) != arch.pixels() || labels.size() != b) {
    throw ShapeError("total_loss: batch of " + std::to_string(b) + " measurements with images " +
                     shape_str(x.shape()) + " and " + std::to_string(labels.size()) + " labels");
  }
  const EncodeResult enc = model.encode(y, Mode::train, rng, noise, tau);
  const Tensor c_prior = hyper.prior_conditioning == PriorConditioning::label
                             ? Tensor({b, arch.k}, one_hot_rows(labels, arch.k))
                             : enc.c_tilde;
  const auto [mu_p, logvar_p] = model.prior(c_prior);
  const Tensor mu_x = model.decode(enc.z, Mode::train, rng);

  const Tensor kl_g = kl_gaussian_diag(enc.mu, enc.logvar, mu_p, logvar_p);
  const Tensor kl_c = kl_categorical_uniform(enc.logits);
  const Tensor rec = reconstruction_term(x, mu_x);
  const Tensor tri = triplet_loss(enc.mu, labels, hyper.margin, single_class_batches);
  const Tensor nll = label_nll(enc.logits, labels);

  LossBreakdown out;
  out.kl_gauss = kl_g.item();
  out.kl_cat = kl_c.item();
  out.recon = rec.item();
  out.triplet = tri.item();
  out.label_nll = nll.item();
  require_finite(out.kl_gauss, "kl_gauss");
  require_finite(out.kl_cat, "kl_cat");
  require_finite(out.recon, "recon");
  require_finite(out.triplet, "triplet");
  require_finite(out.label_nll, "label_nll");
  out.loss = ops::add(ops::add(ops::scale(kl_g, hyper.alpha), ops::scale(kl_c, hyper.beta)),
                      ops::add(ops::scale(rec, -hyper.omega), ops::scale(tri, hyper.gamma)));
  if (hyper.label_weight != 0.0) out.loss = ops::add(out.loss, ops::scale(nll, hyper.label_weight));
  require_finite(out.loss.item(), "total");

  const auto logits = enc.logits.data();
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = logits.subspan(i * arch.k, arch.k);
    const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
    if (pred == labels[i]) ++out.correct;
  }
  return out;
}

std::string format_log_row(const GmvaeEpochLog& row) {
  std::ostringstream os;
  os.precision(10);
  os << row.epoch << ',' << row.loss << ',' << row.kl_gauss << ',' << row.kl_cat << ','
     << row.recon << ',' << row.triplet << ',' << row.train_acc;
  return os.str();
}

namespace {

void check_training_set(const MeasurementDataset& train) {
  std::set<int> classes;
  std::set<std::string> configs;
  for (const auto& r : train.records) {
    classes.insert(r.label);
    configs.insert(r.config_id);
    if (r.image.empty()) throw std::invalid_argument("training records must embed their images");
  }
  if (classes.size() < 2) throw std::invalid_argument("training set spans fewer than 2 classes");
  if (configs.size() < 2) {
    throw std::invalid_argument("training set spans fewer than 2 configurations");
  }
}

}  // namespace

GmvaeTrainResult train_gmvae(const MeasurementDataset& train, const GmvaeArchitecture& arch,
                             const GmvaeHyper& hyper, const TrainOptions& options,
                             const std::function<void(const GmvaeEpochLog&)>& on_epoch) {
  check_training_set(train);
  const InputGeometry geom{arch.channels, arch.side};
  GmvaeTrainResult result{GmvaeModel(arch, options.seed), {}, 0};
  Adam adam(result.model.parameters(), AdamOptions{.learning_rate = options.learning_rate});
  Rng rng(mix_seed(options.seed, 0x747261696e));
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    double tau = hyper.tau;
    if (hyper.tau_start && options.epochs > 1) {
      const double f = static_cast<double>(epoch - 1) / static_cast<double>(options.epochs - 1);
      tau = *hyper.tau_start + (hyper.tau - *hyper.tau_start) * f;
    }
    GmvaeEpochLog row;
    row.epoch = epoch;
    std::size_t seen = 0, correct = 0, step = 0;
    for (const auto& idx : make_batches(shuffled_indices(train.size(), rng), options.batch)) {
      ++step;
      const Tensor y = measurement_batch(train, idx, geom);
      const Tensor x = image_batch(train, idx);
      const auto labels = label_batch(train, idx);
      LossBreakdown terms;
      try {
        terms = total_loss(result.model, y, x, labels, hyper, tau, rng, nullptr,
                           &result.single_class_batches);
        adam.zero_grad();
        terms.loss.backward();
        adam.step();
      } catch (const std::runtime_error& e) {
        throw DivergenceError("gmvae diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step) + ": " + e.what());
      }
      const double w = static_cast<double>(idx.size());
      row.loss += w * terms.loss.item();
      row.kl_gauss += w * terms.kl_gauss;
      row.kl_cat += w * terms.kl_cat;
      row.recon += w * terms.recon;
      row.triplet += w * terms.triplet;
      seen += idx.size();
      correct += terms.correct;
    }
    const double n = static_cast<double>(seen);
    row.loss /= n;
    row.kl_gauss /= n;
    row.kl_cat /= n;
    row.recon /= n;
    row.triplet /= n;
    row.train_acc = static_cast<double>(correct) / n;
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

void write_gmvae_log(const std::filesystem::path& path, const std::vector<GmvaeEpochLog>& log) {
  std::string text = std::string(kGmvaeLogHeader) + "\n";
  for (const auto& row : log) text += format_log_row(row) + "\n";
  write_text_file(path, text);
}

Classification classify(GmvaeModel& model, const Tensor& y) {
  Rng unused(0);
  const Tensor logits = model.class_logits(model.features(y, Mode::eval, unused), Mode::eval, unused);
  const Tensor probs = ops::softmax_rows(logits);
  Classification out;
  const std::size_t k = logits.dim(1);
  out.probabilities.assign(probs.data().begin(), probs.data().end());
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    const auto row = logits.data().subspan(i * k, k);
    out.predicted.push_back(
        static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

Tensor latent_means(GmvaeModel& model, const Tensor& y) {
  Rng unused(0);
  return model.encode(y, Mode::eval, unused).mu.detach();
}

Tensor reconstruct(GmvaeModel& model, const Tensor& y) {
  Rng unused(0);
  const auto enc = model.encode(y, Mode::eval, unused);
  return model.decode(enc.z, Mode::eval, unused).detach();
}

void save_gmvae(const std::filesystem::path& path, const GmvaeModel& model) {
  save_checkpoint(path, model.state());
}

GmvaeModel load_gmvae(const std::filesystem::path& path, const GmvaeArchitecture& arch) {
  GmvaeModel model(arch, 0);
  auto targets = model.state();
  restore(load_checkpoint(path), targets);
  return model;
}

}  // namespace bendlens
