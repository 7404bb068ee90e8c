#pragma once

// Parameter archives.
//
// A checkpoint is a directory holding params.bin and manifest.json.
// params.bin layout (little-endian):
//   bytes 0..7  magic "VSSLCKPT"
//   uint32      format version (1)
//   uint32      array count
//   per array:  uint32 name length, name bytes, uint32 rank, int64[rank] dims,
//               float64 payload (row-major)

#include <filesystem>
#include <string>

#include "json.hpp"
#include "volssl/nn.hpp"

namespace volssl {

struct CheckpointManifest {
  std::string kind;          // "pretrain", "segmentor", ...
  std::string config_hash;   // encoder architecture hash
  nlohmann::json encoder_config;
  Index step = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  static CheckpointManifest from_json(const nlohmann::json& j);
};

void write_archive(const std::filesystem::path& file, const ParameterSet& params);
/// Leaves are created with requires_grad = true.
ParameterSet read_archive(const std::filesystem::path& file);

void save_checkpoint(const std::filesystem::path& dir, const ParameterSet& params, const CheckpointManifest& manifest);
CheckpointManifest read_checkpoint_manifest(const std::filesystem::path& dir);
ParameterSet load_checkpoint(const std::filesystem::path& dir, CheckpointManifest* manifest = nullptr);

}  // namespace volssl
