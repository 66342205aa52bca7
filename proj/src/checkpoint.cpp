#include "bendlens/checkpoint.hpp"

#include <algorithm>
#include <map>

#include "bendlens/binary_io.hpp"

namespace bendlens {

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  ByteWriter w;
  w.magic("BLNS");
  w.u32(kCheckpointVersion);
  for (const auto& t : tensors) {
    w.string(t.name);
    w.u32(static_cast<std::uint32_t>(t.tensor.rank()));
    for (auto d : t.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f64s(t.tensor.data());
  }
  return w.take();
}

std::vector<StoredTensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("BLNS");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::unsupported_version,
                      "checkpoint version " + std::to_string(version));
  }
  std::vector<StoredTensor> out;
  while (!r.at_end()) {
    StoredTensor t;
    t.name = r.string();
    const auto rank = r.u32();
    if (rank > 8) {
      throw FormatError(FormatErrorKind::invalid_field,
                        "rank " + std::to_string(rank) + " for '" + t.name + "'");
    }
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.u32();
      if (d == 0) throw FormatError(FormatErrorKind::invalid_field, "zero dimension in '" + t.name + "'");
      t.shape.push_back(d);
    }
    t.values = r.f64s(numel(t.shape));
    out.push_back(std::move(t));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file(path, encode_checkpoint(tensors));
}

std::vector<StoredTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

void restore(const std::vector<StoredTensor>& stored, std::vector<NamedTensor>& targets) {
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& s : stored) by_name[s.name] = &s;
  if (by_name.size() != targets.size()) {
    throw FormatError(FormatErrorKind::count_mismatch,
                      "checkpoint holds " + std::to_string(by_name.size()) +
                          " tensors, model expects " + std::to_string(targets.size()));
  }
  for (auto& t : targets) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) {
      throw FormatError(FormatErrorKind::invalid_field, "missing tensor '" + t.name + "'");
    }
    if (it->second->shape != t.tensor.shape()) {
      throw FormatError(FormatErrorKind::invalid_field,
                        "tensor '" + t.name + "' stored as " + shape_str(it->second->shape) +
                            ", model has " + shape_str(t.tensor.shape()));
    }
    auto dst = t.tensor.mutable_data();
    std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
  }
}

}  // namespace bendlens
