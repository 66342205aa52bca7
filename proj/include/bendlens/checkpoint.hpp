#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bendlens/tensor.hpp"

namespace bendlens {

/// Parameter checkpoint layout (little-endian):
///   "BLNS" | u32 version | repeated { u32 name_len | name | u32 rank |
///   u32 dims[rank] | f64 payload[prod(dims)] } until end of file.
inline constexpr char kCheckpointMagic[] = "BLNS";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<StoredTensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<StoredTensor> load_checkpoint(const std::filesystem::path& path);

/// Copies stored values into `targets` by name. Every target must be present
/// with an identical shape; extra stored entries are rejected too.
void restore(const std::vector<StoredTensor>& stored, std::vector<NamedTensor>& targets);

}  // namespace bendlens
