#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "afd/tensor.hpp"

namespace afd {

// Named-tensor archive, all integers little-endian:
//   "AFDN" | u32 version | u32 count |
//   count x { u16 name_len | name (UTF-8) | u8 rank | rank x u32 dim | f64 values }
inline constexpr char kArchiveMagic[4] = {'A', 'F', 'D', 'N'};
inline constexpr std::uint32_t kArchiveVersion = 1;

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::vector<char> encode_archive(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_archive(const std::vector<char>& bytes);

/// Writes to a sibling temporary file and renames it into place.
void write_archive(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_archive(const std::filesystem::path& path);

}  // namespace afd
