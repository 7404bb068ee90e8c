#pragma once

// Self-supervised pretext objectives over the shared encoder.
//
// Pure losses (loss_*) take model outputs. compute_pretext_loss runs the
// student (and, for distillation methods, the frozen teacher) on a prepared
// PretextBatch and assembles the method's objective. pretrain_step performs one
// optimiser update followed by the teacher/center updates.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "volssl/encoder.hpp"
#include "volssl/nn.hpp"
#include "volssl/volume.hpp"

namespace volssl {

enum class Method { SimMIM, Inpaint, Recon, Contrastive, Rotation, Dino, Ibot, Smit, SwinUnetrMulti };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
const std::vector<Method>& all_methods();
bool uses_teacher(Method m);

// ---------------------------------------------------------------- masking

/// Exactly floor(ratio * n) distinct indices, uniform without replacement.
MaskSpec sample_mask(const Shape3& grid, double ratio, Rng& rng);

/// Per-voxel 0/1 weights of the masked patches for a volume of grid * patch.
std::vector<double> mask_voxel_weights(const MaskSpec& mask, const Shape3& patch);

/// Zeroes the voxels under masked patches.
Volume corrupt_masked(const Volume& v, const MaskSpec& mask, const Shape3& patch);

// ---------------------------------------------------------------- views

struct Augmentation {
  Shape3 origin{0, 0, 0};
  std::array<bool, 3> flip{false, false, false};
  double scale = 1.0;
  double shift = 0.0;

  nlohmann::json to_json() const;
};

/// Deterministic replay of one augmentation record.
Volume apply_augmentation(const Volume& source, const Augmentation& aug, const Shape3& crop);
Augmentation sample_augmentation(const Shape3& source, const Shape3& crop, Rng& rng, bool jitter = true);

struct ViewPair {
  Volume view1, view2;
  Augmentation aug1, aug2;
};

ViewPair make_view_pair(const Volume& source, const Shape3& crop, Rng& rng);

/// Rotation by class_id * 90 degrees in the axial (h, w) plane; lossless.
Volume apply_rotation(const Volume& v, int class_id);

// ---------------------------------------------------------------- losses

/// Mean squared error over the voxels of masked patches. pred is [voxels, 1].
Var loss_simmim(const Var& pred, const Tensor& target, const MaskSpec& mask, const Shape3& patch);
/// Mean squared error over every voxel.
Var loss_inpaint(const Var& pred, const Tensor& target);
Var loss_recon(const Var& pred, const Tensor& target);
/// InfoNCE over 2N embeddings; rows are L2-normalised before cosine similarity.
Var loss_infonce(const Var& embeddings, const std::vector<int>& partner, double temperature);
Var loss_rotation(const Var& logits, const std::vector<int>& labels, int classes);

struct DistillConfig {
  double tau_s = 0.1;
  double tau_t_start = 0.04;
  double tau_t_end = 0.07;
  double warmup_epochs = 30.0;
  double center_momentum = 0.9;
  double ema_momentum = 0.99;
  Index head_output_dim = 256;

  void validate() const;
  nlohmann::json to_json() const;
  static DistillConfig from_json(const nlohmann::json& j);
};

/// Linear warmup from tau_t_start to tau_t_end over warmup_epochs, then constant.
double teacher_temperature(const DistillConfig& cfg, double epoch);

/// Mean over rows of -sum_k P_t(k) log P_s(k); the teacher side is a constant.
Var distill_ce(const Tensor& teacher_logits, const Var& student_logits, double tau_s, double tau_t, const Tensor& center);

/// teacher <- m * teacher + (1 - m) * student, for every array.
void ema_update(ParameterSet& teacher, const ParameterSet& student, double m);

/// center <- momentum * center + (1 - momentum) * mean_rows(teacher_logits). center is [1, K].
Tensor update_center(const Tensor& center, const Tensor& teacher_logits, double momentum);

// ---------------------------------------------------------------- methods

struct MethodConfig {
  Method method = Method::SimMIM;
  double mask_ratio = 0.75;
  double temperature = 0.5;
  double lambda_g = 1.0;
  double lambda_p = 1.0;
  double lambda_mpd = 0.1;
  double lambda_itd = 0.1;
  int rotation_classes = 4;
  double w_rot = 1.0;
  double w_inpaint = 1.0;
  double w_contrast = 1.0;
  Index bottleneck_dim = 64;
  DistillConfig distill;

  void validate() const;
  nlohmann::json to_json() const;
  static MethodConfig from_json(const nlohmann::json& j);
};

/// Encoder plus the heads the method needs, all in one set.
ParameterSet init_pretext_params(const EncoderConfig& enc, const MethodConfig& mc, Rng& rng);

struct TeacherStudentState {
  ParameterSet student;
  ParameterSet teacher;  // frozen leaves; empty for methods without a teacher
  Tensor center_global;  // [1, K]
  Tensor center_patch;   // [1, K]
  double epoch = 0.0;
};

TeacherStudentState make_state(const EncoderConfig& enc, const MethodConfig& mc, Rng& rng);

/// One sample's prepared inputs. Which fields are populated depends on the method.
struct PretextSample {
  Volume clean;               // crop of the source at the encoder input shape
  std::optional<ViewPair> views;
  MaskSpec mask;              // over the stage-0 grid
  MaskSpec mask2;             // second view's mask (iBOT, SMIT)
  int rotation = 0;
  int rotation2 = 0;
};

struct PretextBatch {
  Index id = 0;
  std::vector<PretextSample> samples;
};

/// Crops, views, masks and rotation labels for `sources` (normalised volumes).
PretextBatch make_pretext_batch(const MethodConfig& mc, const EncoderConfig& enc, const std::vector<const Volume*>& sources,
                                Rng& rng, Index id = 0);

struct PretextLoss {
  Var total;
  std::map<std::string, double> parts;
  Tensor teacher_global;  // teacher head outputs for the center update
  Tensor teacher_patch;
};

PretextLoss compute_pretext_loss(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch,
                                 const TeacherStudentState& state);

// Composite objectives, exposed for direct checks.
PretextLoss loss_ibot(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch, const TeacherStudentState& state);
PretextLoss loss_smit(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch, const TeacherStudentState& state);
PretextLoss loss_swinunetr_multi(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch,
                                 const TeacherStudentState& state);

// ---------------------------------------------------------------- training

struct LossReport {
  Index step = 0;
  double total = 0.0;
  std::map<std::string, double> parts;
  double lr = 0.0;
  double tau_t = 0.0;

  static std::string csv_header(const std::vector<std::string>& part_names);
  std::string csv_row() const;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepSettings {
  double lr = 2e-4;
  double epochs_per_step = 0.0;  // batch_size / pool_size
};

/// Backward, optimiser update, then EMA and center updates for teacher methods.
LossReport pretrain_step(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch, TeacherStudentState& state,
                         AdamW& optimizer, const StepSettings& settings, Index step);

struct PretrainConfig {
  MethodConfig method;
  EncoderConfig encoder;
  Index steps = 300;
  Index batch_size = 2;
  Index warmup_steps = 20;
  AdamWConfig optimizer;
  Index checkpoint_every = 0;  // 0: only the final checkpoint
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct PretrainResult {
  ParameterSet params;  // student, encoder and heads
  std::vector<LossReport> reports;
};

/// Full run over a pool of normalised volumes. Writes loss.csv and checkpoints
/// under out_dir when it is non-empty.
PretrainResult pretrain(const PretrainConfig& cfg, const std::vector<Volume>& pool, const std::filesystem::path& out_dir = {});

}  // namespace volssl
