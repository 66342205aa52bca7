#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "bendlens/dataset.hpp"
#include "bendlens/gmvae.hpp"
#include "bendlens/layers.hpp"

namespace bendlens {

/// Fully convolutional encoder-decoder. Encoder: blocks of `convs_per_block`
/// (3x3 conv, batchnorm, relu) with doubling widths, joined by 2x2 max
/// pooling. Decoder: the mirrored blocks joined by nearest upsampling, then
/// a 1x1 conv and sigmoid to one image channel.
struct AeArchitecture {
  std::size_t channels = 2;
  std::size_t side = 16;
  std::vector<std::size_t> block_channels{8, 16, 32};
  std::size_t convs_per_block = 2;

  void validate() const;
};

class AeModel {
 public:
  AeModel(AeArchitecture arch, std::uint64_t init_seed);

  const AeArchitecture& architecture() const noexcept { return arch_; }

  /// y (B, channels, side, side) -> image (B, side * side) in (0, 1).
  Tensor forward(const Tensor& y, Mode mode, Rng& rng);

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> state() const;
  /// Every layer in forward order, for structural checks.
  std::vector<const Layer*> layers() const;

 private:
  AeArchitecture arch_;
  std::vector<Sequential> encoder_;
  std::vector<Sequential> decoder_;
  Sequential head_;
};

struct AeEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
};

inline constexpr char kAeLogHeader[] = "epoch,loss";

struct AeTrainResult {
  AeModel model;
  std::vector<AeEpochLog> log;
};

/// Pixel-mean squared error between the reconstruction and the image.
AeTrainResult train_ae(const MeasurementDataset& train, const AeArchitecture& arch,
                       const TrainOptions& options,
                       const std::function<void(const AeEpochLog&)>& on_epoch = {});

Tensor ae_reconstruct(AeModel& model, const Tensor& y);

/// The GMVAE class head applied to one-channel reconstructed images:
/// stride-2 conv stack, dense hidden, dropout, dense k.
struct CaeArchitecture {
  std::size_t side = 16;
  std::size_t k = 4;
  std::vector<std::size_t> conv_channels{8, 16, 32};
  std::size_t hidden = 128;
  double dropout = 0.2;
};

class CaeModel {
 public:
  CaeModel(CaeArchitecture arch, std::uint64_t init_seed);

  const CaeArchitecture& architecture() const noexcept { return arch_; }
  /// images (B, side * side) -> logits (B, k).
  Tensor forward(const Tensor& images, Mode mode, Rng& rng);
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> state() const;
  std::vector<const Layer*> layers() const;

 private:
  CaeArchitecture arch_;
  Sequential features_;
  Sequential head_;
};

struct CaeEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
};

inline constexpr char kCaeLogHeader[] = "epoch,loss,train_acc";

struct CaeTrainResult {
  CaeModel model;
  std::vector<CaeEpochLog> log;
};

/// Cross-entropy on the AE reconstructions of the training measurements.
/// A null `ae` is rejected: the classifier is only defined on top of a
/// trained autoencoder.
CaeTrainResult train_cae(AeModel* ae, const MeasurementDataset& train, const CaeArchitecture& arch,
                         const TrainOptions& options,
                         const std::function<void(const CaeEpochLog&)>& on_epoch = {});

/// AE reconstruction followed by the C-AE classifier.
Classification cae_classify(AeModel& ae, CaeModel& cae, const Tensor& y);

void write_ae_log(const std::filesystem::path& path, const std::vector<AeEpochLog>& log);
void write_cae_log(const std::filesystem::path& path, const std::vector<CaeEpochLog>& log);

void save_ae(const std::filesystem::path& path, const AeModel& model);
AeModel load_ae(const std::filesystem::path& path, const AeArchitecture& arch);
void save_cae(const std::filesystem::path& path, const CaeModel& model);
CaeModel load_cae(const std::filesystem::path& path, const CaeArchitecture& arch);

}  // namespace bendlens
