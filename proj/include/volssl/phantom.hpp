#pragma once

// Synthetic two-modality abdominal phantoms, intensity normalisation and the
// dataset manifest that keeps pretraining and fine-tuning patients disjoint.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "volssl/volume.hpp"

namespace volssl {

namespace phantom_class {
inline constexpr int kBackground = 0;
inline constexpr int kLargeOrgan = 1;
inline constexpr int kMediumOrganA = 2;
inline constexpr int kMediumOrganB = 3;
inline constexpr int kSmallOrgan = 4;
inline constexpr int kTumor = 5;
inline constexpr int kCount = 6;
}  // namespace phantom_class

const std::vector<std::string>& phantom_class_names();

/// Minimum phantom extent on every axis.
inline constexpr Index kMinPhantomExtent = 16;

/// Deterministic in (seed, modality, shape). Both modalities of one seed share
/// the label geometry exactly.
std::pair<Volume, LabelMap> generate_phantom(std::uint64_t seed, Modality modality, const Shape3& shape);

/// Clamp to [low, high] then map low -> 0, high -> 1.
Volume normalize_intensity(const Volume& v, double low, double high);

/// Linear-interpolated percentile of the voxels (p in [0, 100]).
double percentile(std::vector<double> values, double p);

/// Window from the volume's own percentiles. A constant volume maps to 0.5
/// everywhere and appends a message to `warnings` when provided.
Volume normalize_percentile(const Volume& v, double p_low, double p_high, std::vector<std::string>* warnings = nullptr);

enum class Split { Pretrain, Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string id;
  std::string volume_path;  // relative to the manifest directory
  std::optional<std::string> label_path;
  Modality modality = Modality::A;
  Split split = Split::Train;
  Index pool_index = 0;
  std::uint64_t phantom_seed = 0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  Shape3 shape{32, 32, 32};

  /// Unique paths, and no pool index shared between pretraining and any
  /// fine-tuning split.
  void validate() const;
  std::vector<ManifestEntry> select(Split split, Modality modality) const;
  std::vector<ManifestEntry> select(Split split) const;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& file) const;
  static DatasetManifest load(const std::filesystem::path& file);
};

struct SplitRequest {
  Split split = Split::Train;
  Modality modality = Modality::A;
  Index count = 0;
  std::optional<Index> pool_start;  // explicit patient range start; auto-allocated when absent
};

struct DatasetConfig {
  std::uint64_t seed = 0;
  Shape3 shape{32, 32, 32};
  Index pool_size = 100000;
  std::vector<SplitRequest> splits;

  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

/// Resolves patient ranges and validates them. No files are touched.
DatasetManifest plan_manifest(const DatasetConfig& cfg);

/// plan_manifest plus phantom generation into `dir` (manifest.json, vols/, labels/).
DatasetManifest build_manifest(const DatasetConfig& cfg, const std::filesystem::path& dir);

/// Loads one manifest entry's volume (and labels when present).
std::pair<Volume, std::optional<LabelMap>> load_entry(const std::filesystem::path& dir, const ManifestEntry& e);

}  // namespace volssl
