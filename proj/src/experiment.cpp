#include "bendlens/experiment.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>

#include <json.hpp>

#include "bendlens/batch.hpp"
#include "bendlens/binary_io.hpp"

namespace bendlens {

using nlohmann::json;

ConfigError::ConfigError(std::string pointer, const std::string& message)
    : std::invalid_argument(pointer + ": " + message), pointer_(std::move(pointer)) {}

PrerequisiteError::PrerequisiteError(std::filesystem::path path, const std::string& message)
    : std::runtime_error(message), path_(std::move(path)) {}

namespace {

std::string escape_token(std::string_view key) {
  std::string out;
  for (char c : key) {
    if (c == '~') {
      out += "~0";
    } else if (c == '/') {
      out += "~1";
    } else {
      out += c;
    }
  }
  return out;
}

// One JSON object under a pointer. Every accessed key is remembered so
// finish() can reject the rest.
class Fields {
 public:
  Fields(const json& doc, std::string pointer) : doc_(doc), pointer_(std::move(pointer)) {
    if (!doc_.is_object()) throw ConfigError(pointer_.empty() ? "/" : pointer_, "expected an object");
  }

  std::string at(std::string_view key) const { return pointer_ + "/" + escape_token(key); }

  const json* optional(std::string_view key) {
    seen_.insert(std::string(key));
    const auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  const json& required(std::string_view key) {
    const json* v = optional(key);
    if (v == nullptr) throw ConfigError(at(key), "missing required key");
    return *v;
  }

  double number(std::string_view key, double lo, bool strict) {
    const auto& v = required(key);
    if (!v.is_number()) throw ConfigError(at(key), "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x) || x < lo || (strict && x == lo)) {
      throw ConfigError(at(key), std::string("must be ") + (strict ? "> " : ">= ") + format_double(lo));
    }
    return x;
  }

  std::uint64_t integer(std::string_view key, std::uint64_t lo) {
    const auto& v = required(key);
    if (!v.is_number_unsigned()) throw ConfigError(at(key), "expected a non-negative integer");
    const auto x = v.get<std::uint64_t>();
    if (x < lo) throw ConfigError(at(key), "must be >= " + std::to_string(lo));
    return x;
  }

  std::string text(std::string_view key) {
    const auto& v = required(key);
    if (!v.is_string()) throw ConfigError(at(key), "expected a string");
    return v.get<std::string>();
  }

  std::vector<std::string> texts(std::string_view key) {
    const auto& v = required(key);
    if (!v.is_array() || v.empty()) throw ConfigError(at(key), "expected a non-empty array of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_string()) throw ConfigError(at(key) + "/" + std::to_string(i), "expected a string");
      out.push_back(v[i].get<std::string>());
      if (std::count(out.begin(), out.end(), out.back()) > 1) {
        throw ConfigError(at(key) + "/" + std::to_string(i), "duplicate entry '" + out.back() + "'");
      }
    }
    return out;
  }

  Fields object(std::string_view key) { return Fields(required(key), at(key)); }

  template <class Parse>
  auto parsed(std::string_view key, Parse parse) {
    const std::string value = text(key);
    try {
      return parse(value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(at(key), e.what());
    }
  }

  void finish() const {
    for (const auto& item : doc_.items()) {
      if (seen_.count(item.key()) == 0) throw ConfigError(at(item.key()), "unknown key");
    }
  }

 private:
  const json& doc_;
  std::string pointer_;
  std::set<std::string> seen_;
};

ImageSource parse_image_source(std::string_view text) {
  if (text == "synthetic_shapes") return ImageSource::synthetic_shapes;
  if (text == "idx_file") return ImageSource::idx_file;
  throw std::invalid_argument("unknown image source '" + std::string(text) +
                              "' (expected synthetic_shapes or idx_file)");
}

std::size_t as_size(std::uint64_t v) { return static_cast<std::size_t>(v); }

void check_ids(const std::vector<std::string>& ids, const std::set<std::string>& grid,
               const std::string& pointer) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (grid.count(ids[i]) == 0) {
      throw ConfigError(pointer + "/" + std::to_string(i),
                        "'" + ids[i] + "' is not a configuration of the ensemble grid");
    }
  }
}

void validate(const ExperimentConfig& c) {
  const auto& e = c.ensemble;
  if (e.side < 8 || (e.side & (e.side - 1)) != 0) {
    throw ConfigError("/ensemble/side", "must be a power of two >= 8");
  }
  if (e.patterns != e.side * e.side) {
    throw ConfigError("/ensemble/M", "must equal side^2 = " + std::to_string(e.side * e.side) +
                                         " so each measurement channel reshapes onto the image grid");
  }
  std::set<std::string> grid;
  for (const auto& g : make_config_grid(e.configs)) grid.insert(g.id);
  const auto& d = c.data;
  check_ids(d.train_configs, grid, "/data/train_configs");
  check_ids(d.unseen_configs, grid, "/data/unseen_configs");
  if (d.train_configs.size() < 2) {
    throw ConfigError("/data/train_configs", "needs at least 2 configurations");
  }
  for (std::size_t i = 0; i < d.unseen_configs.size(); ++i) {
    if (std::count(d.train_configs.begin(), d.train_configs.end(), d.unseen_configs[i]) > 0) {
      throw ConfigError("/data/unseen_configs/" + std::to_string(i),
                        "'" + d.unseen_configs[i] + "' is also a training configuration");
    }
  }
  const std::size_t max_k = d.source == ImageSource::synthetic_shapes ? kShapeClassCount : 10;
  if (d.classes < 2 || d.classes > max_k) {
    throw ConfigError("/data/classes", "must lie in [2, " + std::to_string(max_k) + "]");
  }
  if (d.source == ImageSource::idx_file && (d.idx_images.empty() || d.idx_labels.empty())) {
    throw ConfigError(d.idx_images.empty() ? "/data/idx_images" : "/data/idx_labels",
                      "required when source is idx_file");
  }
  if (d.source == ImageSource::synthetic_shapes && (!d.idx_images.empty() || !d.idx_labels.empty())) {
    throw ConfigError(!d.idx_images.empty() ? "/data/idx_images" : "/data/idx_labels",
                      "only valid when source is idx_file");
  }
  std::set<std::string> tested(d.train_configs.begin(), d.train_configs.end());
  tested.insert(d.unseen_configs.begin(), d.unseen_configs.end());
  for (std::size_t i = 0; i < c.eval.projection_configs.size(); ++i) {
    if (tested.count(c.eval.projection_configs[i]) == 0) {
      throw ConfigError("/eval/projection_configs/" + std::to_string(i),
                        "'" + c.eval.projection_configs[i] + "' is neither a training nor an unseen configuration");
    }
  }
  if (c.eval.projection_per_config * c.eval.projection_configs.size() < 2 * d.classes) {
    throw ConfigError("/eval/projection_per_config",
                      "too few points for two per class in the silhouette");
  }
}

TrainOptions parse_train(Fields& f) {
  TrainOptions t;
  t.epochs = as_size(f.integer("epochs", 1));
  t.learning_rate = f.number("lr", 0.0, true);
  t.batch = as_size(f.integer("batch", 2));
  t.seed = f.integer("seed", 0);
  return t;
}

json train_json(const TrainOptions& t) {
  return {{"epochs", t.epochs}, {"lr", t.learning_rate}, {"batch", t.batch}, {"seed", t.seed}};
}

json to_json(const ExperimentConfig& c) {
  const auto& e = c.ensemble;
  const auto& d = c.data;
  const auto& h = c.gmvae.hyper;
  json data = {{"source", std::string(to_string(d.source))},
               {"classes", d.classes},
               {"per_class_counts", {{"train", d.train_per_class}, {"test", d.test_per_class}}},
               {"noise_std", d.noise_std},
               {"s", d.s},
               {"train_configs", d.train_configs},
               {"unseen_configs", d.unseen_configs},
               {"seed", d.seed}};
  if (d.source == ImageSource::idx_file) {
    data["idx_images"] = d.idx_images;
    data["idx_labels"] = d.idx_labels;
  }
  json gmvae = train_json(c.gmvae.train);
  gmvae.update({{"alpha", h.alpha},
                {"beta", h.beta},
                {"omega", h.omega},
                {"gamma", h.gamma},
                {"tau", h.tau},
                {"margin", h.margin},
                {"label_weight", h.label_weight},
                {"prior_conditioning", std::string(to_string(h.prior_conditioning))},
                {"d", c.gmvae.d},
                {"hidden", c.gmvae.hidden}});
  return {{"ensemble",
           {{"M", e.patterns},
            {"side", e.side},
            {"configs", e.configs},
            {"mode", std::string(to_string(e.mode))},
            {"decorrelation_scale", e.decorrelation_scale},
            {"seed", e.seed}}},
          {"data", data},
          {"normalization", {{"channels", std::string(to_string(c.channels))}}},
          {"gmvae", gmvae},
          {"ae", train_json(c.ae)},
          {"eval",
           {{"out_dir", c.eval.out_dir},
            {"projection_configs", c.eval.projection_configs},
            {"projection_per_config", c.eval.projection_per_config}}}};
}

void diff_into(const json& a, const json& b, const std::string& pointer,
               std::vector<std::string>& out) {
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (const auto& item : a.items()) keys.insert(item.key());
    for (const auto& item : b.items()) keys.insert(item.key());
    for (const auto& k : keys) {
      const std::string p = pointer + "/" + escape_token(k);
      if (!a.contains(k) || !b.contains(k)) {
        out.push_back(p);
      } else {
        diff_into(a[k], b[k], p, out);
      }
    }
  } else if (a != b) {
    out.push_back(pointer.empty() ? "/" : pointer);
  }
}

// ---------------------------------------------------------------------------
// Stages

void say(const Progress& progress, const std::string& line) {
  if (progress) progress(line);
}

void require(const std::filesystem::path& path, std::string_view producer) {
  if (!std::filesystem::exists(path)) {
    throw PrerequisiteError(path, "missing prerequisite " + path.string() + " (produced by `" +
                                      std::string(producer) + "`)");
  }
}

// A run directory belongs to one resolved configuration.
void check_manifest(const std::filesystem::path& dir, std::uint64_t hash) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) return;
  std::string stored;
  try {
    stored = json::parse(read_file_text(path)).at("config_hash").get<std::string>();
  } catch (const std::exception& e) {
    throw PrerequisiteError(path, "unreadable manifest " + path.string() + ": " + e.what());
  }
  if (stored != hex64(hash)) {
    throw PrerequisiteError(path, "artifacts in " + dir.string() + " were produced with config hash " +
                                      stored + ", not " + hex64(hash) +
                                      "; use a fresh --out directory");
  }
}

std::uint64_t file_hash(const std::filesystem::path& path) { return fnv1a64(read_file(path)); }

std::pair<LabelledImageSet, LabelledImageSet> image_sets(const ExperimentConfig& c) {
  const auto& d = c.data;
  const std::size_t side = c.ensemble.side;
  if (d.source == ImageSource::synthetic_shapes) {
    return {gen_shapes(d.train_per_class * d.classes, d.classes, side, mix_seed(d.seed, 1)),
            gen_shapes(d.test_per_class * d.classes, d.classes, side, mix_seed(d.seed, 2))};
  }
  require(d.idx_images, "data.idx_images");
  require(d.idx_labels, "data.idx_labels");
  IdxOptions options;
  options.side = side;
  options.max_classes = d.classes;
  options.per_class = d.train_per_class + d.test_per_class;
  const auto all = read_idx(d.idx_images, d.idx_labels, options);
  LabelledImageSet train, test;
  for (auto* s : {&train, &test}) {
    s->side = side;
    s->k = d.classes;
    s->source = ImageSource::idx_file;
  }
  std::vector<std::size_t> taken(d.classes, 0);
  for (std::size_t i = 0; i < all.count(); ++i) {
    const auto label = static_cast<std::size_t>(all.labels[i]);
    auto& dst = taken[label]++ < d.train_per_class ? train : test;
    dst.labels.push_back(all.labels[i]);
    const auto img = all.image(i);
    dst.pixels.insert(dst.pixels.end(), img.begin(), img.end());
  }
  for (std::size_t k = 0; k < d.classes; ++k) {
    if (taken[k] < d.train_per_class + d.test_per_class) {
      throw ConfigError("/data/per_class_counts", "class " + std::to_string(k) + " has only " +
                                                      std::to_string(taken[k]) + " images in " +
                                                      d.idx_images);
    }
  }
  return {std::move(train), std::move(test)};
}

std::string epoch_line(std::string_view model, std::size_t epoch, std::size_t epochs,
                       const std::string& row) {
  return std::string(model) + " epoch " + std::to_string(epoch) + "/" + std::to_string(epochs) +
         ": " + row;
}

// Per-record outputs of every method on one test set.
struct RecordOutputs {
  std::vector<double> gmvae_psnr;
  std::vector<double> ae_psnr;
  std::vector<int> gmvae_pred;
  std::vector<int> cae_pred;
};

constexpr std::size_t kEvalBatch = 100;

std::vector<std::vector<std::size_t>> chunks(std::vector<std::size_t> indices) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < indices.size(); s += kEvalBatch) {
    out.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(s),
                     indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), s + kEvalBatch)));
  }
  return out;
}

RecordOutputs evaluate_records(const MeasurementDataset& ds, const InputGeometry& geo,
                               GmvaeModel& gmvae, AeModel& ae, CaeModel& cae) {
  RecordOutputs out;
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const std::size_t n = geo.side * geo.side;
  for (const auto& batch : chunks(all)) {
    const Tensor y = measurement_batch(ds, batch, geo);
    const auto g = classify(gmvae, y);
    const Tensor gx = reconstruct(gmvae, y);
    const Tensor ax = ae_reconstruct(ae, y);
    const auto c = cae_classify(ae, cae, y);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& rec = ds.records[batch[i]];
      if (rec.image.size() != n) {
        throw std::runtime_error("record " + std::to_string(batch[i]) + " has no embedded image");
      }
      out.gmvae_psnr.push_back(psnr(rec.image, gx.data().subspan(i * n, n)));
      out.ae_psnr.push_back(psnr(rec.image, ax.data().subspan(i * n, n)));
      out.gmvae_pred.push_back(g.predicted[i]);
      out.cae_pred.push_back(c.predicted[i]);
    }
  }
  return out;
}

struct Group {
  const MeasurementDataset* ds = nullptr;
  const RecordOutputs* out = nullptr;
  std::string name;
  std::vector<std::string> configs;
};

std::vector<std::size_t> indices_at(const MeasurementDataset& ds, const std::string& id) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.records[i].config_id == id) idx.push_back(i);
  }
  if (idx.empty()) throw std::runtime_error("no test records at configuration " + id);
  return idx;
}

template <class T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

ProjectionReport project(std::string which, std::vector<double> vectors, std::size_t d,
                         std::vector<int> labels, std::vector<std::string> configs) {
  const std::size_t n = labels.size();
  ProjectionReport p;
  p.which = std::move(which);
  const auto pca = pca_project(vectors, n, d);
  p.points = pca.projected;
  p.explained = pca.explained;
  p.silhouette = silhouette(vectors, n, d, labels);
  p.labels = std::move(labels);
  p.configs = std::move(configs);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------

GmvaeArchitecture ExperimentConfig::gmvae_architecture() const {
  GmvaeArchitecture a;
  a.channels = channel_count(channels);
  a.side = ensemble.side;
  a.k = data.classes;
  a.latent = gmvae.d;
  a.classifier_hidden = gmvae.hidden;
  return a;
}

AeArchitecture ExperimentConfig::ae_architecture() const {
  AeArchitecture a;
  a.channels = channel_count(channels);
  a.side = ensemble.side;
  return a;
}

CaeArchitecture ExperimentConfig::cae_architecture() const {
  CaeArchitecture a;
  a.side = ensemble.side;
  a.k = data.classes;
  a.hidden = gmvae.hidden;
  return a;
}

ExperimentConfig parse_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("/", std::string("not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Fields root(doc, "");

  auto ens = root.object("ensemble");
  c.ensemble.patterns = as_size(ens.integer("M", 1));
  c.ensemble.side = as_size(ens.integer("side", 1));
  c.ensemble.configs = as_size(ens.integer("configs", 2));
  c.ensemble.mode = ens.parsed("mode", parse_illumination_mode);
  c.ensemble.decorrelation_scale = ens.number("decorrelation_scale", 0.0, true);
  c.ensemble.seed = ens.integer("seed", 0);
  ens.finish();

  auto data = root.object("data");
  c.data.source = data.parsed("source", parse_image_source);
  if (data.optional("idx_images") != nullptr) c.data.idx_images = data.text("idx_images");
  if (data.optional("idx_labels") != nullptr) c.data.idx_labels = data.text("idx_labels");
  c.data.classes = as_size(data.integer("classes", 1));
  auto counts = data.object("per_class_counts");
  c.data.train_per_class = as_size(counts.integer("train", 1));
  c.data.test_per_class = as_size(counts.integer("test", 1));
  counts.finish();
  c.data.noise_std = data.number("noise_std", 0.0, false);
  c.data.s = data.number("s", 0.0, true);
  c.data.train_configs = data.texts("train_configs");
  c.data.unseen_configs = data.texts("unseen_configs");
  c.data.seed = data.integer("seed", 0);
  data.finish();

  auto norm = root.object("normalization");
  c.channels = norm.parsed("channels", parse_normalization_channels);
  norm.finish();

  auto g = root.object("gmvae");
  auto& h = c.gmvae.hyper;
  h.alpha = g.number("alpha", 0.0, false);
  h.beta = g.number("beta", 0.0, false);
  h.omega = g.number("omega", 0.0, false);
  h.gamma = g.number("gamma", 0.0, false);
  h.tau = g.number("tau", 0.0, true);
  h.margin = g.number("margin", 0.0, false);
  h.label_weight = g.number("label_weight", 0.0, false);
  h.prior_conditioning = g.parsed("prior_conditioning", parse_prior_conditioning);
  c.gmvae.d = as_size(g.integer("d", 1));
  c.gmvae.hidden = as_size(g.integer("hidden", 1));
  c.gmvae.train = parse_train(g);
  g.finish();

  auto ae = root.object("ae");
  c.ae = parse_train(ae);
  ae.finish();

  auto ev = root.object("eval");
  c.eval.out_dir = ev.text("out_dir");
  c.eval.projection_configs = ev.texts("projection_configs");
  c.eval.projection_per_config = as_size(ev.integer("projection_per_config", 1));
  ev.finish();

  root.finish();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw PrerequisiteError(path, "missing config file " + path.string());
  }
  return parse_config(read_file_text(path));
}

std::string config_to_json(const ExperimentConfig& config) { return to_json(config).dump(2) + "\n"; }

std::uint64_t config_hash(const ExperimentConfig& config) { return fnv1a64(config_to_json(config)); }

ExperimentConfig for_experiment(ExperimentConfig config, int experiment) {
  if (experiment == 1) {
    config.ensemble.mode = IlluminationMode::wavefront_shaped;
    config.data.s = kDampingExperiment1;
  } else if (experiment == 2) {
    config.ensemble.mode = IlluminationMode::random;
    config.data.s = kDampingExperiment2;
  } else {
    throw ConfigError("--experiment", "must be 1 or 2, got " + std::to_string(experiment));
  }
  return config;
}

int experiment_of(const ExperimentConfig& config) {
  return config.ensemble.mode == IlluminationMode::wavefront_shaped ? 1 : 2;
}

ExperimentConfig with_seed(ExperimentConfig config, std::uint64_t seed) {
  config.ensemble.seed = seed;
  config.data.seed = seed;
  config.gmvae.train.seed = seed;
  config.ae.seed = seed;
  return config;
}

std::vector<std::string> config_diff(const ExperimentConfig& a, const ExperimentConfig& b) {
  std::vector<std::string> out;
  diff_into(to_json(a), to_json(b), "", out);
  return out;
}

std::size_t thread_cap(const char* env_value) {
  if (env_value == nullptr) return 1;
  const std::string text(env_value);
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
  if (text.empty() || text[0] == '-' || *end != '\0' || errno != 0 || v == 0) {
    throw ConfigError("BENDLENS_THREADS", "expected a positive integer, got '" + text + "'");
  }
  return static_cast<std::size_t>(v);
}

ModelKind parse_model_kind(std::string_view text) {
  if (text == "gmvae") return ModelKind::gmvae;
  if (text == "ae") return ModelKind::ae;
  if (text == "cae") return ModelKind::cae;
  throw std::invalid_argument("unknown model '" + std::string(text) + "' (expected gmvae, ae or cae)");
}

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::gmvae: return "gmvae";
    case ModelKind::ae: return "ae";
    case ModelKind::cae: return "cae";
  }
  return "?";
}

void write_manifest(const std::filesystem::path& dir, std::uint64_t hash,
                    std::optional<int> experiment) {
  const auto self = dir / "manifest.json";
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path() != self) files.push_back(entry.path());
  }
  json artifacts = json::object();
  for (const auto& f : files) {
    artifacts[std::filesystem::relative(f, dir).generic_string()] = hex64(file_hash(f));
  }
  json m = {{"config_hash", hex64(hash)}, {"artifacts", artifacts}};
  if (experiment) m["experiment"] = *experiment;
  write_text_file(self, m.dump(2) + "\n");
}

void run_simulate(const ExperimentConfig& c, const RunLayout& run, const Progress& progress) {
  const auto hash = config_hash(c);
  check_manifest(run.root, hash);
  const auto& e = c.ensemble;
  say(progress, "simulate: " + std::to_string(e.configs) + " configurations, M=" +
                    std::to_string(e.patterns) + ", N=" + std::to_string(e.side * e.side) + ", " +
                    std::string(to_string(e.mode)));
  const auto ensemble = gen_speckle_ensemble(e.patterns, e.side * e.side, make_config_grid(e.configs),
                                             e.mode, e.decorrelation_scale, e.seed);
  std::filesystem::create_directories(run.root);
  save_ensemble(run.ensemble(), ensemble);
  write_manifest(run.root, hash, experiment_of(c));
  say(progress, "simulate: wrote " + run.ensemble().string());
}

void run_synth(const ExperimentConfig& c, const RunLayout& run, const Progress& progress) {
  const auto hash = config_hash(c);
  check_manifest(run.root, hash);
  require(run.ensemble(), "simulate");
  const auto ensemble = load_ensemble(run.ensemble());
  const auto [train_images, test_images] = image_sets(c);
  SynthesisOptions o;
  o.noise_std = c.data.noise_std;
  o.damping = c.data.s;
  o.channels = c.channels;
  o.noise_seed = mix_seed(c.data.seed, 3);
  auto train = synthesize_measurements(train_images, ensemble, c.data.train_configs, o);
  train.split = SplitTag::train;
  o.holdout = true;
  o.noise_seed = mix_seed(c.data.seed, 4);
  auto seen = synthesize_measurements(test_images, ensemble, c.data.train_configs, o);
  seen.split = SplitTag::test_seen;
  o.noise_seed = mix_seed(c.data.seed, 5);
  auto unseen = synthesize_measurements(test_images, ensemble, c.data.unseen_configs, o);
  unseen.split = SplitTag::test_unseen;
  std::filesystem::create_directories(run.train_data().parent_path());
  save_dataset(run.train_data(), train);
  save_dataset(run.seen_data(), seen);
  save_dataset(run.unseen_data(), unseen);
  write_manifest(run.root, hash, experiment_of(c));
  say(progress, "synth-data: " + std::to_string(train.size()) + " train, " +
                    std::to_string(seen.size()) + " seen-test, " + std::to_string(unseen.size()) +
                    " unseen-test records");
}

void run_train(const ExperimentConfig& c, const RunLayout& run, ModelKind model,
               const Progress& progress) {
  const auto hash = config_hash(c);
  check_manifest(run.root, hash);
  require(run.train_data(), "synth-data");
  if (model == ModelKind::cae) require(run.ae(), "train --model ae");
  const auto train = load_dataset(run.train_data());
  std::filesystem::create_directories(run.gmvae().parent_path());
  switch (model) {
    case ModelKind::gmvae: {
      const auto epochs = c.gmvae.train.epochs;
      auto r = train_gmvae(train, c.gmvae_architecture(), c.gmvae.hyper, c.gmvae.train,
                           [&](const GmvaeEpochLog& row) {
                             say(progress, epoch_line("gmvae", row.epoch, epochs, format_log_row(row)));
                           });
      save_gmvae(run.gmvae(), r.model);
      write_gmvae_log(run.gmvae_log(), r.log);
      break;
    }
    case ModelKind::ae: {
      auto r = train_ae(train, c.ae_architecture(), c.ae, [&](const AeEpochLog& row) {
        say(progress, epoch_line("ae", row.epoch, c.ae.epochs, "loss=" + format_double(row.loss)));
      });
      save_ae(run.ae(), r.model);
      write_ae_log(run.ae_log(), r.log);
      break;
    }
    case ModelKind::cae: {
      auto ae = load_ae(run.ae(), c.ae_architecture());
      auto r = train_cae(&ae, train, c.cae_architecture(), c.ae, [&](const CaeEpochLog& row) {
        say(progress, epoch_line("cae", row.epoch, c.ae.epochs,
                                 "loss=" + format_double(row.loss) +
                                     " train_acc=" + format_double(row.train_acc)));
      });
      save_cae(run.cae(), r.model);
      write_cae_log(run.cae_log(), r.log);
      break;
    }
  }
  write_manifest(run.root, hash, experiment_of(c));
}

EvalReport run_eval(const ExperimentConfig& c, const RunLayout& run, const Progress& progress) {
  const auto hash = config_hash(c);
  check_manifest(run.root, hash);
  require(run.seen_data(), "synth-data");
  require(run.unseen_data(), "synth-data");
  require(run.gmvae(), "train --model gmvae");
  require(run.ae(), "train --model ae");
  require(run.cae(), "train --model cae");
  const auto seen = load_dataset(run.seen_data());
  const auto unseen = load_dataset(run.unseen_data());
  auto gmvae = load_gmvae(run.gmvae(), c.gmvae_architecture());
  auto ae = load_ae(run.ae(), c.ae_architecture());
  auto cae = load_cae(run.cae(), c.cae_architecture());
  const InputGeometry geo{channel_count(c.channels), c.ensemble.side};
  const std::size_t k = c.data.classes;

  say(progress, "eval: " + std::to_string(seen.size() + unseen.size()) + " test records");
  const auto seen_out = evaluate_records(seen, geo, gmvae, ae, cae);
  const auto unseen_out = evaluate_records(unseen, geo, gmvae, ae, cae);
  const std::vector<Group> groups = {{&seen, &seen_out, "seen", c.data.train_configs},
                                     {&unseen, &unseen_out, "unseen", c.data.unseen_configs}};

  EvalReport r;
  r.experiment = experiment_of(c);
  r.illumination = std::string(to_string(c.ensemble.mode));
  r.k = k;
  r.seeds = {{"ensemble", c.ensemble.seed},
             {"data", c.data.seed},
             {"gmvae", c.gmvae.train.seed},
             {"ae", c.ae.seed}};
  r.seen_configs = c.data.train_configs;
  r.unseen_configs = c.data.unseen_configs;
  r.hashes = {{"ensemble", hex64(seen.ensemble_hash)},
              {"gmvae", hex64(file_hash(run.gmvae()))},
              {"ae", hex64(file_hash(run.ae()))},
              {"cae", hex64(file_hash(run.cae()))}};

  struct Method {
    std::string name;
    std::string classifier;
    std::vector<double> RecordOutputs::*psnr;
    std::vector<int> RecordOutputs::*pred;
  };
  const std::vector<Method> methods = {
      {"gmvae", "gmvae", &RecordOutputs::gmvae_psnr, &RecordOutputs::gmvae_pred},
      {"ae", "cae", &RecordOutputs::ae_psnr, &RecordOutputs::cae_pred}};
  for (const auto& m : methods) {
    MethodSummary s;
    for (const auto& g : groups) {
      std::vector<double> means, accs;
      std::vector<ConfusionMatrix> matrices;
      for (const auto& id : g.configs) {
        const auto idx = indices_at(*g.ds, id);
        const auto ps = pick(g.out->*m.psnr, idx);
        const auto pred = pick(g.out->*m.pred, idx);
        std::vector<int> labels;
        for (auto i : idx) labels.push_back(g.ds->records[i].label);
        const auto cm = confusion_matrix(pred, labels, k);
        r.psnr.push_back({id, m.name, g.name, mean_std(ps), idx.size()});
        r.accuracy.push_back({id, m.classifier, g.name, cm.accuracy(), idx.size()});
        means.push_back(r.psnr.back().psnr.mean);
        accs.push_back(cm.accuracy());
        matrices.push_back(cm);
      }
      if (g.name == "seen") {
        s.seen_psnr = mean_std(means);
        s.seen_accuracy = accuracy_stats(accs);
      } else {
        s.unseen_psnr = mean_std(means);
        s.unseen_accuracy = accuracy_stats(accs);
        s.unseen_confusion = average_normalized(matrices);
      }
    }
    s.psnr_gap = s.seen_psnr.mean - s.unseen_psnr.mean;
    r.summary[m.name] = s;
  }

  std::vector<double> raw, latent;
  std::vector<int> labels;
  std::vector<std::string> configs;
  std::size_t raw_d = 0;
  for (const auto& id : c.eval.projection_configs) {
    const auto* ds = std::count(c.data.train_configs.begin(), c.data.train_configs.end(), id) > 0
                         ? &seen
                         : &unseen;
    auto idx = indices_at(*ds, id);
    idx.resize(std::min(idx.size(), c.eval.projection_per_config));
    for (const auto& batch : chunks(idx)) {
      const Tensor mu = latent_means(gmvae, measurement_batch(*ds, batch, geo));
      latent.insert(latent.end(), mu.data().begin(), mu.data().end());
    }
    for (auto i : idx) {
      const auto& rec = ds->records[i];
      raw_d = rec.y.size();
      raw.insert(raw.end(), rec.y.begin(), rec.y.end());
      labels.push_back(rec.label);
      configs.push_back(id);
    }
  }
  r.projections.push_back(project("raw", std::move(raw), raw_d, labels, configs));
  r.projections.push_back(project("latent", std::move(latent), c.gmvae.d, labels, configs));

  emit_report(r, run.report());
  write_manifest(run.root, hash, experiment_of(c));
  const auto& g = r.summary.at("gmvae");
  const auto& a = r.summary.at("ae");
  say(progress, "eval: gmvae unseen PSNR " + format_double(g.unseen_psnr.mean) + " dB, accuracy " +
                    format_double(g.unseen_accuracy.mean) + "; ae unseen PSNR " +
                    format_double(a.unseen_psnr.mean) + " dB, c-ae accuracy " +
                    format_double(a.unseen_accuracy.mean));
  return r;
}

DemoResult run_demo(const ExperimentConfig& config, const std::filesystem::path& root,
                    const Progress& progress) {
  const auto hash = config_hash(config);
  check_manifest(root, hash);
  std::map<int, EvalReport> reports;
  for (int e : {1, 2}) {
    const auto c = for_experiment(config, e);
    const RunLayout run{root / ("experiment" + std::to_string(e))};
    const Progress tagged = progress ? Progress([&, e](const std::string& line) {
      progress("[experiment " + std::to_string(e) + "] " + line);
    })
                                     : Progress();
    run_simulate(c, run, tagged);
    run_synth(c, run, tagged);
    for (auto m : {ModelKind::gmvae, ModelKind::ae, ModelKind::cae}) run_train(c, run, m, tagged);
    reports[e] = run_eval(c, run, tagged);
  }
  write_manifest(root, hash, std::nullopt);
  return {reports.at(1), reports.at(2)};
}

}  // namespace bendlens
