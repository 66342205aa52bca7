#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bendlens/batch.hpp"
#include "bendlens/dataset.hpp"
#include "bendlens/layers.hpp"
#include "bendlens/tensor.hpp"

namespace bendlens {

/// Raised when a loss term or the total loss stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Loss building blocks

/// softmax((logits + g) / tau) with g the supplied Gumbel noise (B, k).
Tensor gumbel_softmax(const Tensor& logits, const Tensor& gumbel_noise, double tau);
/// Draws the Gumbel noise from `rng`.
Tensor gumbel_softmax_sample(const Tensor& logits, double tau, Rng& rng);

/// KL(N(mu_q, exp(logvar_q)) || N(mu_p, exp(logvar_p))) summed over the
/// latent axis and averaged over the batch.
Tensor kl_gaussian_diag(const Tensor& mu_q, const Tensor& logvar_q, const Tensor& mu_p,
                        const Tensor& logvar_p);
double kl_gaussian_diag(std::span<const double> mu_q, std::span<const double> var_q,
                        std::span<const double> mu_p, std::span<const double> var_p);

/// sum_i pi_i ln(k pi_i) with pi = softmax(logits), averaged over the batch.
Tensor kl_categorical_uniform(const Tensor& logits);
double kl_categorical_uniform(std::span<const double> probabilities);

/// -1/2 ||x - mu_x||^2 per sample, averaged over the batch.
Tensor reconstruction_term(const Tensor& x, const Tensor& mu_x);
double reconstruction_term(std::span<const double> x, std::span<const double> mu_x);

/// -log softmax(logits)[label], averaged over the batch.
Tensor label_nll(const Tensor& logits, std::span<const int> labels);

/// Batch-hard triplet loss on (B, d) embeddings with squared Euclidean
/// distances: mean over anchors that have a positive of
/// max(0, max_p d(a, p) - min_n d(a, n) + margin). A batch with a single
/// class yields 0 and increments `single_class_batches` when given.
Tensor triplet_loss(const Tensor& embeddings, std::span<const int> labels, double margin,
                    std::size_t* single_class_batches = nullptr);

// ---------------------------------------------------------------------------
// Model

struct GmvaeArchitecture {
  std::size_t channels = 2;  // measurement channels of the input grid
  std::size_t side = 16;     // input grid and image side
  std::size_t k = 4;
  std::size_t latent = 64;   // d
  std::size_t classifier_hidden = 128;
  std::vector<std::size_t> conv_channels{8, 16, 32};
  double dropout = 0.2;

  void validate() const;
  std::size_t pixels() const noexcept { return side * side; }
  /// Spatial extent after the stride-2 encoder stack.
  std::size_t bottleneck_side() const noexcept { return side >> conv_channels.size(); }
  std::size_t feature_size() const noexcept {
    return conv_channels.back() * bottleneck_side() * bottleneck_side();
  }
};

/// Which one-hot vector conditions the prior p(z | c) during training.
/// `sampled` feeds the Gumbel-Softmax draw c~; `label` feeds the true class,
/// so mixture component j is the prior of class j. Evaluation always uses
/// the predicted class.
enum class PriorConditioning { sampled, label };

std::string_view to_string(PriorConditioning p);
PriorConditioning parse_prior_conditioning(std::string_view text);

struct GmvaeHyper {
  double alpha = 1.0;
  double beta = 200.0;
  double omega = 50.0;
  double gamma = 50.0;
  double tau = 0.5;
  /// When set, tau decays linearly from tau_start to tau over training.
  std::optional<double> tau_start;
  double margin = 1.0;
  /// Weight of the supervised term -log pi_label. With only the KL to the
  /// uniform prior acting on q(c | y), the class head has no signal tying
  /// component j to class j; 0 recovers the bare objective.
  double label_weight = 200.0;
  PriorConditioning prior_conditioning = PriorConditioning::sampled;
};

/// Noise that train-mode encoding would otherwise draw; fixing it makes the
/// forward pass a deterministic function of the parameters.
struct EncodeNoise {
  Tensor gumbel;   // (B, k)
  Tensor epsilon;  // (B, d)
};

struct EncodeResult {
  Tensor logits;   // (B, k)
  Tensor c_tilde;  // (B, k), Gumbel-Softmax draw (one-hot argmax in eval)
  Tensor mu;       // (B, d)
  Tensor logvar;   // (B, d), clamped to [-10, 10]
  Tensor z;        // (B, d)
};

inline constexpr double kLogVarBound = 10.0;

class GmvaeModel {
 public:
  GmvaeModel(GmvaeArchitecture arch, std::uint64_t init_seed);

  const GmvaeArchitecture& architecture() const noexcept { return arch_; }

  /// y (B, channels, side, side) -> y^ (B, F).
  Tensor features(const Tensor& y, Mode mode, Rng& rng);
  Tensor class_logits(const Tensor& features, Mode mode, Rng& rng);
  /// (mu, logvar) of q(z | y, c); dropout is applied to the features first.
  std::pair<Tensor, Tensor> inference(const Tensor& features, const Tensor& c, Mode mode,
                                      Rng& rng);
  /// (mu, logvar) of p(z | c).
  std::pair<Tensor, Tensor> prior(const Tensor& c);
  /// z (B, d) -> mu_x (B, N) in (0, 1).
  Tensor decode(const Tensor& z, Mode mode, Rng& rng);

  /// Train mode samples c~ and z (or uses `noise`); eval mode takes the
  /// argmax class and z = mu.
  EncodeResult encode(const Tensor& y, Mode mode, Rng& rng, const EncodeNoise* noise = nullptr,
                      double tau = 0.5);

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> state() const;
  /// Every layer in forward order.
  std::vector<const Layer*> layers() const;

  /// Names of the sub-networks, for the gradient report.
  Sequential& encoder() { return encoder_; }
  Sequential& classifier() { return classifier_; }
  Sequential& decoder_head() { return decoder_head_; }
  Sequential& decoder_body() { return decoder_body_; }

 private:
  GmvaeModel(GmvaeArchitecture arch, Rng init);

  GmvaeArchitecture arch_;
  Sequential encoder_;
  Sequential classifier_;
  Layer inference_mu_;
  Layer inference_logvar_;
  Layer prior_mu_;
  Layer prior_logvar_;
  Sequential decoder_head_;  // dense to the bottleneck grid
  Sequential decoder_body_;  // transposed convolutions
  Layer decoder_out_;        // dense to N pixels
};

std::vector<double> one_hot_rows(std::span<const int> labels, std::size_t k);

struct LossBreakdown {
  Tensor loss;
  double kl_gauss = 0.0;
  double kl_cat = 0.0;
  double recon = 0.0;
  double triplet = 0.0;
  double label_nll = 0.0;
  std::size_t correct = 0;  // argmax(logits) == label within the batch
};

/// alpha KL_gauss + beta KL_cat - omega recon + gamma triplet
/// + label_weight label_nll, the negated objective; minimized in training. Throws DivergenceError naming the
/// first non-finite term.
LossBreakdown total_loss(GmvaeModel& model, const Tensor& y, const Tensor& x,
                         std::span<const int> labels, const GmvaeHyper& hyper, double tau,
                         Rng& rng, const EncodeNoise* noise = nullptr,
                         std::size_t* single_class_batches = nullptr);

struct TrainOptions {
  std::size_t epochs = 60;
  double learning_rate = 1e-3;
  std::size_t batch = 64;
  std::uint64_t seed = 0;
};

struct GmvaeEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double kl_gauss = 0.0;
  double kl_cat = 0.0;
  double recon = 0.0;
  double triplet = 0.0;
  double train_acc = 0.0;
};

inline constexpr char kGmvaeLogHeader[] = "epoch,loss,kl_gauss,kl_cat,recon,triplet,train_acc";
std::string format_log_row(const GmvaeEpochLog& row);

struct GmvaeTrainResult {
  GmvaeModel model;
  std::vector<GmvaeEpochLog> log;
  std::size_t single_class_batches = 0;
};

/// Requires >= 2 classes and >= 2 configurations with embedded images.
/// `on_epoch` (optional) sees each log row as it is produced.
GmvaeTrainResult train_gmvae(const MeasurementDataset& train, const GmvaeArchitecture& arch,
                             const GmvaeHyper& hyper, const TrainOptions& options,
                             const std::function<void(const GmvaeEpochLog&)>& on_epoch = {});

void write_gmvae_log(const std::filesystem::path& path, const std::vector<GmvaeEpochLog>& log);

struct Classification {
  std::vector<int> predicted;
  std::vector<double> probabilities;  // B x k, rows sum to 1
};

/// Eval-mode, noise-free inference on y (B, channels, side, side).
Classification classify(GmvaeModel& model, const Tensor& y);
/// mu_x(mu_z(y, argmax c)), (B, N).
Tensor reconstruct(GmvaeModel& model, const Tensor& y);
/// mu_z(y, argmax c), (B, d).
Tensor latent_means(GmvaeModel& model, const Tensor& y);

void save_gmvae(const std::filesystem::path& path, const GmvaeModel& model);
GmvaeModel load_gmvae(const std::filesystem::path& path, const GmvaeArchitecture& arch);

}  // namespace bendlens
