#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "unmask/nets.hpp"
#include "unmask/tensor.hpp"

namespace unmask {

inline constexpr uint32_t kCheckpointVersion = 1;

// One serializable bundle of named float tensors plus run metadata. The file
// layout is a fixed magic ("UMCK"), a u32 format version, a u64 JSON header
// length, the JSON header (step, run_id, config echo, class names, build id,
// normalization stats, tensor directory with byte offsets), then the raw
// float32 blobs back to back.
struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  int64_t step = 0;
  std::string run_id;
  std::string config_echo;
  std::string build_id;
  NormStats stats;
  std::vector<std::string> class_names;
  std::vector<std::pair<std::string, TensorF>> tensors;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
// Throws on missing file, bad magic, version mismatch, or truncated payload.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Snapshot a parameter store (tensors cloned, insertion order kept).
Checkpoint snapshot_store(const ParamStore& store, int64_t step, const std::string& run_id,
                          const std::string& config_echo,
                          const std::vector<std::string>& class_names);
// Strict restore into an existing store; `who` names the network in errors.
void restore_store(const Checkpoint& ck, ParamStore& store, const std::string& who);

}  // namespace unmask
