#include "bendlens/ae.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "bendlens/adam.hpp"
#include "bendlens/batch.hpp"
#include "bendlens/binary_io.hpp"
#include "bendlens/checkpoint.hpp"
#include "bendlens/ops.hpp"

namespace bendlens {
namespace {

void add_block(Sequential& seq, std::size_t in, std::size_t out, std::size_t convs, Rng& init) {
  for (std::size_t i = 0; i < convs; ++i) {
    seq.add(LayerSpec::conv2d(i == 0 ? in : out, out, 3, 1, 1), init)
        .add(LayerSpec::batchnorm(out), init)
        .add(LayerSpec::relu(), init);
  }
}

std::string seq_name(const char* prefix, std::size_t i) {
  return std::string(prefix) + std::to_string(i);
}

template <typename Row>
void check_finite_epoch(const Row& row, const char* model) {
  if (!std::isfinite(row.loss)) {
    throw DivergenceError(std::string(model) + " diverged at epoch " + std::to_string(row.epoch));
  }
}

void require_images(const MeasurementDataset& train) {
  if (train.records.empty()) throw std::invalid_argument("training set is empty");
  for (const auto& r : train.records) {
    if (r.image.empty()) throw std::invalid_argument("training records must embed their images");
  }
}

}  // namespace

void AeArchitecture::validate() const {
  if (channels == 0 || block_channels.empty() || convs_per_block == 0) {
    throw std::invalid_argument("ae architecture: channels, blocks and convs must be positive");
  }
  const std::size_t pools = block_channels.size() - 1;
  if (side == 0 || side % (std::size_t{1} << pools) != 0) {
    throw std::invalid_argument("ae architecture: side " + std::to_string(side) +
                                " is not divisible by 2^" + std::to_string(pools));
  }
}

AeModel::AeModel(AeArchitecture arch, std::uint64_t init_seed)
    : arch_(std::move(arch)), head_("ae.head") {
  arch_.validate();
  Rng init(mix_seed(init_seed, 0x6165));
  const auto& ch = arch_.block_channels;
  std::size_t in = arch_.channels;
  for (std::size_t i = 0; i < ch.size(); ++i) {
    encoder_.emplace_back(seq_name("ae.encoder", i));
    add_block(encoder_.back(), in, ch[i], arch_.convs_per_block, init);
    in = ch[i];
  }
  for (std::size_t i = ch.size(); i-- > 0;) {
    const std::size_t out = i == 0 ? ch[0] : ch[i - 1];
    decoder_.emplace_back(seq_name("ae.decoder", ch.size() - 1 - i));
    add_block(decoder_.back(), in, out, arch_.convs_per_block, init);
    in = out;
  }
  head_.add(LayerSpec::conv2d(in, 1, 1, 1, 0), init).add(LayerSpec::sigmoid(), init);
}

Tensor AeModel::forward(const Tensor& y, Mode mode, Rng& rng) {
  const Shape expected{y.rank() > 0 ? y.dim(0) : 0, arch_.channels, arch_.side, arch_.side};
  if (y.shape() != expected) {
    throw ShapeError("ae: expected measurements " + shape_str(expected) + ", got " +
                     shape_str(y.shape()));
  }
  Tensor h = y;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    if (i > 0) h = ops::max_pool2d(h, 2);
    h = encoder_[i].forward(h, mode, rng);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    if (i > 0) h = ops::upsample_nearest(h, 2);
    h = decoder_[i].forward(h, mode, rng);
  }
  return ops::flatten(head_.forward(h, mode, rng));
}

std::vector<NamedTensor> AeModel::parameters() const {
  std::vector<NamedTensor> out;
  for (const auto& s : encoder_) append(out, s.parameters());
  for (const auto& s : decoder_) append(out, s.parameters());
  append(out, head_.parameters());
  return out;
}

std::vector<NamedTensor> AeModel::state() const {
  std::vector<NamedTensor> out;
  for (const auto& s : encoder_) append(out, s.state());
  for (const auto& s : decoder_) append(out, s.state());
  append(out, head_.state());
  return out;
}

std::vector<const Layer*> AeModel::layers() const {
  std::vector<const Layer*> out;
  for (const auto* group : {&encoder_, &decoder_}) {
    for (const auto& s : *group) {
      for (const auto& l : s.layers()) out.push_back(&l);
    }
  }
  for (const auto& l : head_.layers()) out.push_back(&l);
  return out;
}

AeTrainResult train_ae(const MeasurementDataset& train, const AeArchitecture& arch,
                       const TrainOptions& options,
                       const std::function<void(const AeEpochLog&)>& on_epoch) {
  require_images(train);
  AeTrainResult result{AeModel(arch, options.seed), {}};
  const InputGeometry geom{arch.channels, arch.side};
  Adam adam(result.model.parameters(), AdamOptions{.learning_rate = options.learning_rate});
  Rng rng(mix_seed(options.seed, 0x61657472));
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    AeEpochLog row{epoch, 0.0};
    std::size_t seen = 0;
    for (const auto& idx : make_batches(shuffled_indices(train.size(), rng), options.batch)) {
      const Tensor y = measurement_batch(train, idx, geom);
      const Tensor x = image_batch(train, idx);
      const Tensor loss = ops::mean(ops::square(ops::sub(result.model.forward(y, Mode::train, rng), x)));
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("ae diverged at epoch " + std::to_string(epoch));
      }
      adam.zero_grad();
      loss.backward();
      adam.step();
      row.loss += loss.item() * static_cast<double>(idx.size());
      seen += idx.size();
    }
    row.loss /= static_cast<double>(seen);
    check_finite_epoch(row, "ae");
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

Tensor ae_reconstruct(AeModel& model, const Tensor& y) {
  Rng unused(0);
  return model.forward(y, Mode::eval, unused).detach();
}

CaeModel::CaeModel(CaeArchitecture arch, std::uint64_t init_seed)
    : arch_(std::move(arch)), features_("cae.features"), head_("cae.head") {
  if (arch_.conv_channels.empty() || arch_.k < 2 ||
      arch_.side % (std::size_t{1} << arch_.conv_channels.size()) != 0) {
    throw std::invalid_argument("cae architecture: invalid side, k or conv stack");
  }
  Rng init(mix_seed(init_seed, 0x636165));
  std::size_t in = 1;
  for (auto out : arch_.conv_channels) {
    features_.add(LayerSpec::conv2d(in, out, 3, 2, 1), init)
        .add(LayerSpec::batchnorm(out), init)
        .add(LayerSpec::relu(), init);
    in = out;
  }
  const std::size_t bs = arch_.side >> arch_.conv_channels.size();
  head_.add(LayerSpec::dense(in * bs * bs, arch_.hidden), init)
      .add(LayerSpec::relu(), init)
      .add(LayerSpec::dropout(arch_.dropout), init)
      .add(LayerSpec::dense(arch_.hidden, arch_.k), init);
}

Tensor CaeModel::forward(const Tensor& images, Mode mode, Rng& rng) {
  const std::size_t b = images.dim(0);
  const Tensor grid = ops::reshape(images, {b, 1, arch_.side, arch_.side});
  return head_.forward(ops::flatten(features_.forward(grid, mode, rng)), mode, rng);
}

std::vector<NamedTensor> CaeModel::parameters() const {
  auto out = features_.parameters();
  append(out, head_.parameters());
  return out;
}

std::vector<NamedTensor> CaeModel::state() const {
  auto out = features_.state();
  append(out, head_.state());
  return out;
}

std::vector<const Layer*> CaeModel::layers() const {
  std::vector<const Layer*> out;
  for (const auto& l : features_.layers()) out.push_back(&l);
  for (const auto& l : head_.layers()) out.push_back(&l);
  return out;
}

CaeTrainResult train_cae(AeModel* ae, const MeasurementDataset& train, const CaeArchitecture& arch,
                         const TrainOptions& options,
                         const std::function<void(const CaeEpochLog&)>& on_epoch) {
  if (ae == nullptr) {
    throw std::invalid_argument("train_cae: a trained AE is required before the C-AE");
  }
  if (train.records.empty()) throw std::invalid_argument("training set is empty");
  const InputGeometry geom{ae->architecture().channels, ae->architecture().side};
  // The classifier only ever sees AE outputs, so reconstruct once up front.
  std::vector<std::size_t> all(train.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<double> recon;
  recon.reserve(train.size() * geom.side * geom.side);
  for (const auto& idx : make_batches(all, 256)) {
    const Tensor r = ae_reconstruct(*ae, measurement_batch(train, idx, geom));
    recon.insert(recon.end(), r.data().begin(), r.data().end());
  }
  const std::size_t n = geom.side * geom.side;

  CaeTrainResult result{CaeModel(arch, options.seed), {}};
  Adam adam(result.model.parameters(), AdamOptions{.learning_rate = options.learning_rate});
  Rng rng(mix_seed(options.seed, 0x63616574));
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    CaeEpochLog row{epoch, 0.0, 0.0};
    std::size_t seen = 0, correct = 0;
    for (const auto& idx : make_batches(shuffled_indices(train.size(), rng), options.batch)) {
      std::vector<double> x;
      x.reserve(idx.size() * n);
      for (auto i : idx) x.insert(x.end(), recon.begin() + i * n, recon.begin() + (i + 1) * n);
      const auto labels = label_batch(train, idx);
      const Tensor logits = result.model.forward(Tensor({idx.size(), n}, std::move(x)),
                                                 Mode::train, rng);
      const Tensor loss = label_nll(logits, labels);
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("cae diverged at epoch " + std::to_string(epoch));
      }
      adam.zero_grad();
      loss.backward();
      adam.step();
      const auto v = logits.data();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto row_v = v.subspan(i * arch.k, arch.k);
        if (std::max_element(row_v.begin(), row_v.end()) - row_v.begin() == labels[i]) ++correct;
      }
      row.loss += loss.item() * static_cast<double>(idx.size());
      seen += idx.size();
    }
    row.loss /= static_cast<double>(seen);
    row.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

Classification cae_classify(AeModel& ae, CaeModel& cae, const Tensor& y) {
  Rng unused(0);
  const Tensor logits = cae.forward(ae_reconstruct(ae, y), Mode::eval, unused);
  const Tensor probs = ops::softmax_rows(logits);
  const std::size_t k = logits.dim(1);
  Classification out;
  out.probabilities.assign(probs.data().begin(), probs.data().end());
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    const auto row = logits.data().subspan(i * k, k);
    out.predicted.push_back(
        static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

void write_ae_log(const std::filesystem::path& path, const std::vector<AeEpochLog>& log) {
  std::ostringstream os;
  os.precision(10);
  os << kAeLogHeader << '\n';
  for (const auto& r : log) os << r.epoch << ',' << r.loss << '\n';
  write_text_file(path, os.str());
}

void write_cae_log(const std::filesystem::path& path, const std::vector<CaeEpochLog>& log) {
  std::ostringstream os;
  os.precision(10);
  os << kCaeLogHeader << '\n';
  for (const auto& r : log) os << r.epoch << ',' << r.loss << ',' << r.train_acc << '\n';
  write_text_file(path, os.str());
}

void save_ae(const std::filesystem::path& path, const AeModel& model) {
  save_checkpoint(path, model.state());
}

AeModel load_ae(const std::filesystem::path& path, const AeArchitecture& arch) {
  AeModel model(arch, 0);
  auto targets = model.state();
  restore(load_checkpoint(path), targets);
  return model;
}

void save_cae(const std::filesystem::path& path, const CaeModel& model) {
  save_checkpoint(path, model.state());
}

CaeModel load_cae(const std::filesystem::path& path, const CaeArchitecture& arch) {
  CaeModel model(arch, 0);
  auto targets = model.state();
  restore(load_checkpoint(path), targets);
  return model;
}

}  // namespace bendlens
