#pragma once

// Volumes, label maps and their flat binary container.
//
// File layout (little-endian):
//   bytes 0..7   magic "VSSLVOL\0"
//   bytes 8..11  uint32 format version (1)
//   bytes 12..15 uint32 kind (0 = intensity volume, 1 = label map)
//   int64[3]     shape (depth, height, width)
//   float64[3]   spacing in mm
//   uint32       dtype (1 = float32, 2 = float64, 3 = int32, 4 = uint8)
//   uint32       modality (0 = A, 1 = B)
//   uint32 + n   id string
//   uint32       class-name count, then (uint32 + n) per name (label maps only; 0 otherwise)
//   payload      row-major voxels, w fastest

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "volssl/autograd.hpp"

namespace volssl {

enum class Modality { A = 0, B = 1 };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

using Spacing = std::array<double, 3>;
inline constexpr Spacing kDefaultSpacing{1.5, 1.5, 2.0};

class Volume {
 public:
  Volume() = default;
  Volume(Shape3 shape, Modality modality, std::string id, Spacing spacing = kDefaultSpacing);
  Volume(Shape3 shape, std::vector<double> voxels, Modality modality, std::string id,
         Spacing spacing = kDefaultSpacing);

  const Shape3& shape() const { return shape_; }
  const Spacing& spacing() const { return spacing_; }
  Modality modality() const { return modality_; }
  const std::string& id() const { return id_; }
  Index size() const { return volume_of(shape_); }

  std::vector<double>& voxels() { return voxels_; }
  const std::vector<double>& voxels() const { return voxels_; }
  Index index(Index d, Index h, Index w) const { return (d * shape_[1] + h) * shape_[2] + w; }
  double& at(Index d, Index h, Index w) { return voxels_[static_cast<std::size_t>(index(d, h, w))]; }
  double at(Index d, Index h, Index w) const { return voxels_[static_cast<std::size_t>(index(d, h, w))]; }

  /// Copy with new voxel content and shape; modality and spacing carry over.
  Volume with_voxels(Shape3 shape, std::vector<double> voxels) const;
  /// [voxels, 1] tensor view for the network.
  Tensor as_column() const;

  bool operator==(const Volume& o) const {
    return shape_ == o.shape_ && spacing_ == o.spacing_ && modality_ == o.modality_ && id_ == o.id_ && voxels_ == o.voxels_;
  }

 private:
  Shape3 shape_{0, 0, 0};
  Spacing spacing_ = kDefaultSpacing;
  Modality modality_ = Modality::A;
  std::string id_;
  std::vector<double> voxels_;
};

struct LabelMap {
  Shape3 shape{0, 0, 0};
  std::vector<int> labels;
  std::vector<std::string> class_names;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  Index index(Index d, Index h, Index w) const { return (d * shape[1] + h) * shape[2] + w; }
  int at(Index d, Index h, Index w) const { return labels[static_cast<std::size_t>(index(d, h, w))]; }
  /// Throws if any label is outside [0, num_classes).
  void validate() const;
  bool operator==(const LabelMap& o) const = default;
};

enum class VoxelType : std::uint32_t { Float32 = 1, Float64 = 2, Int32 = 3, UInt8 = 4 };

void write_volume(const std::filesystem::path& path, const Volume& v, VoxelType dtype = VoxelType::Float32);
Volume read_volume(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const LabelMap& l, const Spacing& spacing = kDefaultSpacing);
LabelMap read_labels(const std::filesystem::path& path);

/// Sub-block starting at `origin` with extent `size` (must lie inside).
Volume crop(const Volume& v, const Shape3& origin, const Shape3& size);
LabelMap crop(const LabelMap& l, const Shape3& origin, const Shape3& size);

}  // namespace volssl
