#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace hvtsurv {

struct NamedTensor {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> values;  // row-major
};

/// Checkpoint container, little-endian:
///   "HVTC" | u32 version | u32 text_len | key=value lines |
///   u32 count | count x (u32 name_len | name | u32 rows | u32 cols | f32[rows*cols])
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::map<std::string, std::string> config;
  std::vector<NamedTensor> tensors;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace hvtsurv
