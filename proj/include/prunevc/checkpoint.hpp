#pragma once

#include <map>
#include <string>

#include "prunevc/tensor.hpp"

namespace prunevc {

// Single-file model snapshot. Layout (little-endian):
//   magic "PVCK", u32 version (1),
//   u64 manifest length + bytes (the resolved run configuration),
//   u64 array count, then per array:
//     u32 name length + bytes, u32 ndim, i64 dims..., float32 data,
//   u64 metadata count, then per entry: u32+key, u32+value.
// Raw float storage makes save/load bit-exact.
struct Checkpoint {
  std::string manifest;
  std::map<std::string, Tensor> arrays;
  std::map<std::string, std::string> meta;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace prunevc
