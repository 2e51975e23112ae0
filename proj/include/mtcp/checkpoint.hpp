#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mtcp/nn.hpp"

namespace mtcp {

inline constexpr char kCheckpointMagic[9] = "MTCP0001";

/// Named tensors as stored on disk.
struct Checkpoint {
  std::vector<nn::NamedTensor> entries;
  std::string config_text;  // run configuration the tensors belong to

  const Tensor* find(const std::string& name) const;
};

/// Little-endian: magic, u32 entry count, then per entry u32 name length,
/// name bytes, u32 rank, u64 dims, f64 values. The configuration travels as
/// a byte tensor named "meta.config".
void save_checkpoint(const std::filesystem::path& path, const nn::ParamSet& params, const std::string& config_text);
/// IoError on unreadable files, truncation or a different format version.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies every parameter and buffer of `params` from the checkpoint.
/// Missing names or shape mismatches raise StateError.
void restore(const Checkpoint& checkpoint, const nn::ParamSet& params);

}  // namespace mtcp
