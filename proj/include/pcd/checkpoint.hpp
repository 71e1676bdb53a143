#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "pcd/tensor.hpp"

namespace pcd {

struct CheckpointEntry {
  std::string path;
  Shape shape;
  std::vector<float> data;
};

// Named parameter map plus JSON metadata with a bit-exact, explicitly
// little-endian binary serialization:
//   magic "PCD1" | u32 version=1 | u32 json_len, json | u32 entry_count |
//   per entry: u16 path_len, path | u8 dtype(0=f32) | u8 ndim | ndim x u64 |
//              raw f32 data
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  bool has(const std::string& path) const;
  const CheckpointEntry& at(const std::string& path) const;
  void add(const std::string& path, const Tensor& t);
  Tensor tensor(const std::string& path, bool requires_grad = false) const;
};

void save_checkpoint(const Checkpoint& c, const std::string& file);
Checkpoint load_checkpoint(const std::string& file);

// FNV-1a over all entry payloads (paths, shapes, raw data), in order.
uint64_t checkpoint_hash(const Checkpoint& c);

}  // namespace pcd
