#pragma once

// Hierarchical shifted-window attention encoder for 3D volumes.
//
// Stage s works on a grid of input / (patch * 2^s) tokens with embed_dim * 2^s
// channels. Stages are joined by 2x2x2 patch merging (concatenate, layer norm,
// linear 8C -> 2C). When a stage grid is smaller than the configured window on
// an axis, the window shrinks to the grid on that axis and that axis is never
// shifted.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "volssl/autograd.hpp"
#include "volssl/nn.hpp"
#include "volssl/volume.hpp"

namespace volssl {

inline constexpr int kStages = 4;

struct EncoderConfig {
  std::array<int, kStages> depths{1, 1, 2, 1};
  std::array<int, kStages> heads{2, 2, 4, 4};
  Shape3 patch{2, 2, 2};
  Shape3 window{4, 4, 4};
  Index embed_dim = 24;
  Shape3 input_shape{32, 32, 32};
  int mlp_ratio = 4;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  Shape3 stage_grid(int stage) const;
  Index stage_channels(int stage) const { return embed_dim << stage; }
  /// Largest extent per axis that is at most `window` and divides the grid.
  Shape3 stage_window(int stage) const;
  /// Cyclic shift used by block `block` of `stage` (zero on even blocks).
  Shape3 block_shift(int stage, int block) const;
  int total_blocks() const;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
  /// Stable hex digest of the architecture fields.
  std::string hash() const;

  bool operator==(const EncoderConfig&) const = default;
};

/// Named presets: "tiny" (gradient checks), "desk", "desk-16", "paper-base",
/// "smit-s", "smit-p".
EncoderConfig encoder_preset(const std::string& name);
std::vector<std::string> encoder_preset_names();

/// Masked stage-0 token positions (flat indices into the stage-0 grid).
struct MaskSpec {
  Shape3 grid{0, 0, 0};
  double ratio = 0.0;
  std::vector<Index> indices;  // sorted, unique

  std::vector<std::uint8_t> flags() const;
  bool contains(Index i) const;
};

struct TokenGrid {
  Var tokens;  // [volume_of(grid), channels]
  Shape3 grid{0, 0, 0};
  int stage = 0;

  Index channels() const { return tokens.cols(); }
};

struct EncoderOutput {
  /// Stage outputs, layer-normalised without affine parameters.
  std::array<TokenGrid, kStages> stages;
  /// Tap 0 is the patch embedding; tap k >= 1 is the output of the k-th block.
  std::vector<TokenGrid> taps;
};

/// Learnable arrays of an encoder, named "<prefix>patch_embed.weight", ...
ParameterSet init_encoder(const EncoderConfig& cfg, Rng& rng, const std::string& prefix = "encoder.");

/// Exact learnable scalar count, computed from the configuration alone.
Index parameter_count(const EncoderConfig& cfg);

/// Volume tensor is [voxels, 1] in (d, h, w) order with extent `shape`.
TokenGrid patch_embed(const Var& volume, const Shape3& shape, const EncoderConfig& cfg, const ParameterSet& params,
                      const std::string& prefix = "encoder.");

EncoderOutput encode(const Var& volume, const Shape3& shape, const EncoderConfig& cfg, const ParameterSet& params,
                     const MaskSpec* mask = nullptr, const std::string& prefix = "encoder.");

/// Global average of the last stage: [1, channels].
Var pooled_embedding(const EncoderOutput& features);

/// Verifies every expected encoder array exists with the right shape.
void require_encoder_params(const EncoderConfig& cfg, const ParameterSet& params, const std::string& prefix = "encoder.");

}  // namespace volssl
