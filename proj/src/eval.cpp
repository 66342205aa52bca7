#include "bendlens/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "bendlens/binary_io.hpp"

namespace bendlens {

double psnr(std::span<const double> x, std::span<const double> estimate, double peak) {
  if (x.size() != estimate.size() || x.empty()) {
    throw std::invalid_argument("psnr: images of " + std::to_string(x.size()) + " and " +
                                std::to_string(estimate.size()) + " pixels");
  }
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  double mse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mse += (x[i] - estimate[i]) * (x[i] - estimate[i]);
  mse /= static_cast<double>(x.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean_std: no values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / n)};
}

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

double ConfusionMatrix::accuracy() const {
  std::size_t diag = 0;
  for (std::size_t i = 0; i < k; ++i) diag += counts[i * k + i];
  const std::size_t t = total();
  return t == 0 ? 0.0 : static_cast<double>(diag) / static_cast<double>(t);
}

std::vector<double> ConfusionMatrix::normalized() const {
  std::vector<double> out(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t row = 0;
    for (std::size_t j = 0; j < k; ++j) row += counts[i * k + j];
    if (row == 0) continue;
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = static_cast<double>(counts[i * k + j]) / static_cast<double>(row);
    }
  }
  return out;
}

ConfusionMatrix confusion_matrix(std::span<const int> predicted, std::span<const int> labels,
                                 std::size_t k) {
  if (predicted.size() != labels.size()) {
    throw std::invalid_argument("confusion_matrix: prediction and label counts differ");
  }
  ConfusionMatrix m{k, std::vector<std::size_t>(k * k, 0)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predicted[i];
    for (int c : {t, p}) {
      if (c < 0 || static_cast<std::size_t>(c) >= k) {
        throw std::out_of_range("confusion_matrix: class " + std::to_string(c) + " outside 0.." +
                                std::to_string(k - 1));
      }
    }
    ++m.counts[static_cast<std::size_t>(t) * k + static_cast<std::size_t>(p)];
  }
  return m;
}

std::vector<double> average_normalized(const std::vector<ConfusionMatrix>& matrices) {
  if (matrices.empty()) throw std::invalid_argument("average_normalized: no matrices");
  const std::size_t k = matrices.front().k;
  std::vector<double> out(k * k, 0.0);
  for (const auto& m : matrices) {
    if (m.k != k) throw std::invalid_argument("average_normalized: class counts differ");
    const auto n = m.normalized();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += n[i];
  }
  for (auto& v : out) v /= static_cast<double>(matrices.size());
  return out;
}

SymmetricEigen jacobi_eigen(std::vector<double> a, std::size_t n, double tolerance,
                            std::size_t max_sweeps) {
  if (n == 0 || a.size() != n * n) throw std::invalid_argument("jacobi_eigen: not a square matrix");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double x = a[i * n + j], y = a[j * n + i];
      if (std::abs(x - y) > 1e-12 * std::max({1.0, std::abs(x), std::abs(y)})) {
        throw std::invalid_argument("jacobi_eigen: matrix is not symmetric");
      }
    }
  }
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  double norm = 0.0;
  for (double x : a) norm += x * x;
  norm = std::sqrt(norm);
  auto off = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i != j) s += a[i * n + j] * a[i * n + j];
      }
    }
    return std::sqrt(s);
  };

  SymmetricEigen out;
  out.n = n;
  while (norm > 0.0 && off() > tolerance * norm) {
    if (out.sweeps == max_sweeps) {
      throw std::runtime_error("jacobi_eigen: no convergence after " + std::to_string(max_sweeps) +
                               " sweeps");
    }
    ++out.sweeps;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        a[p * n + q] = a[q * n + p] = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a[i * n + i] > a[j * n + j]; });
  out.values.resize(n);
  out.vectors.resize(n * n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t c = order[r];
    out.values[r] = a[c * n + c];
    std::size_t big = 0;
    for (std::size_t k = 1; k < n; ++k) {
      if (std::abs(v[k * n + c]) > std::abs(v[big * n + c])) big = k;
    }
    const double sign = v[big * n + c] < 0.0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < n; ++k) out.vectors[r * n + k] = sign * v[k * n + c];
  }
  return out;
}

PcaResult pca_project(std::span<const double> vectors, std::size_t n, std::size_t d,
                      std::size_t components) {
  if (d < 3) throw std::invalid_argument("pca_project: dimension " + std::to_string(d) + " < 3");
  if (vectors.size() != n * d) throw std::invalid_argument("pca_project: data is not n x d");
  if (components == 0 || n < components || components > d) {
    throw std::invalid_argument("pca_project: need at least " + std::to_string(components) +
                                " points");
  }
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += vectors[i * d + j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  std::vector<double> x(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = vectors[i * d + j] - mean[j];
  }
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;

  PcaResult out;
  out.n = n;
  out.components = components;
  out.axes.assign(components * d, 0.0);
  double trace = 0.0;
  for (double v : x) trace += v * v;
  trace /= denom;

  if (n < d) {
    std::vector<double> gram(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += x[i * d + t] * x[j * d + t];
        gram[i * n + j] = gram[j * n + i] = s / denom;
      }
    }
    const auto eig = jacobi_eigen(std::move(gram), n);
    for (std::size_t c = 0; c < components; ++c) {
      // Covariance eigenvector = X^T u, normalized.
      double norm = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x[i * d + t] * eig.vectors[c * n + i];
        out.axes[c * d + t] = s;
        norm += s * s;
      }
      norm = std::sqrt(norm);
      if (norm > 0.0) {
        std::size_t big = 0;
        for (std::size_t t = 0; t < d; ++t) {
          out.axes[c * d + t] /= norm;
          if (std::abs(out.axes[c * d + t]) > std::abs(out.axes[c * d + big])) big = t;
        }
        if (out.axes[c * d + big] < 0.0) {
          for (std::size_t t = 0; t < d; ++t) out.axes[c * d + t] = -out.axes[c * d + t];
        }
      }
      out.explained.push_back(trace > 0.0 ? std::max(0.0, eig.values[c]) / trace : 0.0);
    }
  } else {
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < d; ++a) {
        const double xa = x[i * d + a];
        for (std::size_t b = a; b < d; ++b) cov[a * d + b] += xa * x[i * d + b];
      }
    }
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = a; b < d; ++b) cov[b * d + a] = cov[a * d + b] = cov[a * d + b] / denom;
    }
    const auto eig = jacobi_eigen(std::move(cov), d);
    for (std::size_t c = 0; c < components; ++c) {
      std::copy_n(eig.vectors.begin() + c * d, d, out.axes.begin() + c * d);
      out.explained.push_back(trace > 0.0 ? std::max(0.0, eig.values[c]) / trace : 0.0);
    }
  }

  out.projected.assign(n * components, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < components; ++c) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += x[i * d + t] * out.axes[c * d + t];
      out.projected[i * components + c] = s;
    }
  }
  return out;
}

double silhouette(std::span<const double> points, std::size_t n, std::size_t d,
                  std::span<const int> labels) {
  if (points.size() != n * d || labels.size() != n) {
    throw std::invalid_argument("silhouette: points and labels disagree");
  }
  std::map<int, std::size_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw std::invalid_argument("silhouette: need at least two clusters");
  for (const auto& [label, size] : sizes) {
    if (size < 2) {
      throw std::invalid_argument("silhouette: cluster " + std::to_string(label) +
                                  " has a single point");
    }
  }
  std::vector<int> ids;
  for (const auto& kv : sizes) ids.push_back(kv.first);
  auto index_of = [&](int label) {
    return static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), label) - ids.begin());
  };
  std::vector<std::size_t> cluster(n);
  for (std::size_t i = 0; i < n; ++i) cluster[i] = index_of(labels[i]);
  std::vector<double> counts(ids.size());
  for (std::size_t c = 0; c < ids.size(); ++c) counts[c] = static_cast<double>(sizes[ids[c]]);

  double total = 0.0;
  std::vector<double> sums(ids.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = points[i * d + t] - points[j * d + t];
        s += diff * diff;
      }
      sums[cluster[j]] += std::sqrt(s);
    }
    const std::size_t own = cluster[i];
    const double a = sums[own] / (counts[own] - 1.0);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < ids.size(); ++c) {
      if (c != own) b = std::min(b, sums[c] / counts[c]);
    }
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Report serialization

using nlohmann::json;

namespace {

json to_j(const MeanStd& m) { return json{{"mean", m.mean}, {"std", m.std}}; }
MeanStd mean_std_from(const json& j) { return {j.at("mean").get<double>(), j.at("std").get<double>()}; }

}  // namespace

std::string report_to_json(const EvalReport& r) {
  json j;
  j["experiment"] = r.experiment;
  j["illumination"] = r.illumination;
  j["k"] = r.k;
  j["seeds"] = r.seeds;
  j["seen_configs"] = r.seen_configs;
  j["unseen_configs"] = r.unseen_configs;
  j["hashes"] = r.hashes;
  j["psnr"] = json::array();
  for (const auto& p : r.psnr) {
    j["psnr"].push_back({{"config", p.config},
                         {"method", p.method},
                         {"group", p.group},
                         {"mean", p.psnr.mean},
                         {"std", p.psnr.std},
                         {"count", p.count}});
  }
  j["accuracy"] = json::array();
  for (const auto& a : r.accuracy) {
    j["accuracy"].push_back({{"config", a.config},
                             {"method", a.method},
                             {"group", a.group},
                             {"accuracy", a.accuracy},
                             {"count", a.count}});
  }
  j["summary"] = json::object();
  for (const auto& [method, s] : r.summary) {
    j["summary"][method] = {{"seen_psnr", to_j(s.seen_psnr)},
                            {"unseen_psnr", to_j(s.unseen_psnr)},
                            {"psnr_gap", s.psnr_gap},
                            {"seen_accuracy", to_j(s.seen_accuracy)},
                            {"unseen_accuracy", to_j(s.unseen_accuracy)},
                            {"unseen_confusion", s.unseen_confusion}};
  }
  j["projections"] = json::array();
  for (const auto& p : r.projections) {
    j["projections"].push_back({{"which", p.which},
                                {"points", p.points},
                                {"labels", p.labels},
                                {"configs", p.configs},
                                {"explained", p.explained},
                                {"silhouette", p.silhouette}});
  }
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  const json j = json::parse(text);
  EvalReport r;
  r.experiment = j.at("experiment").get<int>();
  r.illumination = j.at("illumination").get<std::string>();
  r.k = j.at("k").get<std::size_t>();
  r.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
  r.seen_configs = j.at("seen_configs").get<std::vector<std::string>>();
  r.unseen_configs = j.at("unseen_configs").get<std::vector<std::string>>();
  r.hashes = j.at("hashes").get<std::map<std::string, std::string>>();
  for (const auto& p : j.at("psnr")) {
    r.psnr.push_back({p.at("config").get<std::string>(), p.at("method").get<std::string>(),
                      p.at("group").get<std::string>(),
                      {p.at("mean").get<double>(), p.at("std").get<double>()},
                      p.at("count").get<std::size_t>()});
  }
  for (const auto& a : j.at("accuracy")) {
    r.accuracy.push_back({a.at("config").get<std::string>(), a.at("method").get<std::string>(),
                          a.at("group").get<std::string>(), a.at("accuracy").get<double>(),
                          a.at("count").get<std::size_t>()});
  }
  for (const auto& [method, s] : j.at("summary").items()) {
    MethodSummary m;
    m.seen_psnr = mean_std_from(s.at("seen_psnr"));
    m.unseen_psnr = mean_std_from(s.at("unseen_psnr"));
    m.psnr_gap = s.at("psnr_gap").get<double>();
    m.seen_accuracy = mean_std_from(s.at("seen_accuracy"));
    m.unseen_accuracy = mean_std_from(s.at("unseen_accuracy"));
    m.unseen_confusion = s.at("unseen_confusion").get<std::vector<double>>();
    r.summary[method] = std::move(m);
  }
  for (const auto& p : j.at("projections")) {
    r.projections.push_back({p.at("which").get<std::string>(),
                             p.at("points").get<std::vector<double>>(),
                             p.at("labels").get<std::vector<int>>(),
                             p.at("configs").get<std::vector<std::string>>(),
                             p.at("explained").get<std::vector<double>>(),
                             p.at("silhouette").get<double>()});
  }
  return r;
}

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                          "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string classification_name(const std::string& method) {
  return method == "ae" ? "cae" : method;
}

}  // namespace

std::string projection_svg(const ProjectionReport& p) {
  const std::size_t n = p.labels.size();
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = p.points[i * 3], y = p.points[i * 3 + 1];
    if (i == 0 || x < xmin) xmin = x;
    if (i == 0 || x > xmax) xmax = x;
    if (i == 0 || y < ymin) ymin = y;
    if (i == 0 || y > ymax) ymax = y;
  }
  const double size = 480.0, margin = 20.0;
  const double sx = xmax > xmin ? (size - 2 * margin) / (xmax - xmin) : 1.0;
  const double sy = ymax > ymin ? (size - 2 * margin) / (ymax - ymin) : 1.0;
  std::vector<std::string> configs;
  for (const auto& c : p.configs) {
    if (std::find(configs.begin(), configs.end(), c) == configs.end()) configs.push_back(c);
  }
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"480\" "
        "viewBox=\"0 0 480 480\">\n"
     << "<title>pca " << p.which << "</title>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const double x = margin + (p.points[i * 3] - xmin) * sx;
    const double y = size - margin - (p.points[i * 3 + 1] - ymin) * sy;
    const char* fill = kPalette[static_cast<std::size_t>(std::max(0, p.labels[i])) % 8];
    const auto shape = static_cast<std::size_t>(
        std::find(configs.begin(), configs.end(), p.configs[i]) - configs.begin());
    char buf[200];
    if (shape % 2 == 0) {
      std::snprintf(buf, sizeof buf,
                    "<circle class=\"point\" cx=\"%.3f\" cy=\"%.3f\" r=\"%.1f\" fill=\"%s\" "
                    "fill-opacity=\"0.7\"/>\n",
                    x, y, 2.5 + static_cast<double>(shape / 2), fill);
    } else {
      const double h = 2.5 + static_cast<double>(shape / 2);
      std::snprintf(buf, sizeof buf,
                    "<rect class=\"point\" x=\"%.3f\" y=\"%.3f\" width=\"%.1f\" height=\"%.1f\" "
                    "fill=\"%s\" fill-opacity=\"0.7\"/>\n",
                    x - h, y - h, 2 * h, 2 * h, fill);
    }
    os << buf;
  }
  os << "</svg>\n";
  return os.str();
}

void emit_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw std::runtime_error("cannot create report directory " + dir.string());
  }
  write_text_file(dir / "report.json", report_to_json(r));

  std::ostringstream psnr_csv;
  psnr_csv << "config,method,mean,std\n";
  for (const auto& p : r.psnr) {
    psnr_csv << p.config << ',' << p.method << ',' << format_double(p.psnr.mean) << ','
             << format_double(p.psnr.std) << '\n';
  }
  write_text_file(dir / "psnr.csv", psnr_csv.str());

  for (const auto& [method, s] : r.summary) {
    std::ostringstream os;
    os << "true";
    for (std::size_t j = 0; j < r.k; ++j) os << ",pred_" << j;
    os << '\n';
    for (std::size_t i = 0; i < r.k && s.unseen_confusion.size() == r.k * r.k; ++i) {
      os << i;
      for (std::size_t j = 0; j < r.k; ++j) os << ',' << format_double(s.unseen_confusion[i * r.k + j]);
      os << '\n';
    }
    write_text_file(dir / ("confusion_" + classification_name(method) + ".csv"), os.str());
  }

  for (const auto& p : r.projections) {
    std::ostringstream os;
    os << "x,y,z,label,config\n";
    for (std::size_t i = 0; i < p.labels.size(); ++i) {
      os << format_double(p.points[i * 3]) << ',' << format_double(p.points[i * 3 + 1]) << ','
         << format_double(p.points[i * 3 + 2]) << ',' << p.labels[i] << ',' << p.configs[i]
         << '\n';
    }
    write_text_file(dir / ("pca_" + p.which + ".csv"), os.str());
    write_text_file(dir / ("pca_" + p.which + ".svg"), projection_svg(p));
  }
}

}  // namespace bendlens
