#pragma once

// Binary container shared by checkpoints and exported datasets:
//
//   "BNNL" | u32 version | u64 n | n bytes of canonical JSON header
//   | u64 tensor count | per tensor: u32 name length, name, u32 rank,
//     rank x u64 extents, extents-product x f64
//   | u64 FNV-1a checksum of every preceding byte
//
// All integers and reals are little-endian.

#include <cstdint>
#include <string>
#include <vector>

#include "bnnlab/tensor.hpp"
#include "json.hpp"

namespace bnnlab {

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;
};

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes, const std::string& source);

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

}  // namespace bnnlab
