#pragma once

// Segmentor (encoder plus convolutional decoder with skip connections),
// crop sampling, sliding-window inference and supervised fine-tuning.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "volssl/encoder.hpp"
#include "volssl/metrics.hpp"
#include "volssl/nn.hpp"
#include "volssl/phantom.hpp"
#include "volssl/volume.hpp"

namespace volssl {

enum class TaskMode { Organs, Tumor };
std::string to_string(TaskMode t);
TaskMode task_from_string(const std::string& s);
int task_classes(TaskMode t);
/// Names of the scored foreground structures, class 1 first.
const std::vector<std::string>& task_structures(TaskMode t);
/// Phantom labels to task labels: organs keep 1..4 with tumor merged into the
/// large organ; tumor is binary.
LabelMap task_labels(const LabelMap& phantom, TaskMode t);
/// Fine-tuning intensity preparation: modality A soft-tissue window, modality B
/// 5th-95th percentile window.
Volume prepare_finetune_volume(const Volume& raw, std::vector<std::string>* warnings = nullptr);
/// Pretraining intensity preparation.
Volume prepare_pretrain_volume(const Volume& raw);

struct SegmentorConfig {
  EncoderConfig encoder;
  int num_classes = 5;
  Index decoder_base = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static SegmentorConfig from_json(const nlohmann::json& j);
};

/// Random encoder and decoder. With `checkpoint`, encoder arrays are copied
/// from the archive after its config hash is checked; the decoder stays fresh.
ParameterSet build_segmentor(const SegmentorConfig& cfg, Rng& rng, const std::optional<std::filesystem::path>& checkpoint = {});
/// Same as above with the encoder taken from an in-memory set.
ParameterSet build_segmentor(const SegmentorConfig& cfg, Rng& rng, const ParameterSet& encoder_source);

Index segmentor_parameter_count(const SegmentorConfig& cfg);

/// Logits [voxels, num_classes] for a volume of exactly encoder.input_shape.
Var segmentor_forward(const ParameterSet& params, const SegmentorConfig& cfg, const Volume& v);

/// 0.5 * cross-entropy + 0.5 * (1 - soft Dice over the foreground classes).
Var seg_loss(const Var& logits, std::span<const int> labels, TaskMode mode);

struct Crop {
  Volume volume;
  LabelMap labels;
  bool foreground_sampled = false;
  bool contains_foreground = false;
};

struct CropBatch {
  std::vector<Crop> crops;
  Shape3 crop_shape{0, 0, 0};
};

/// Slot i is a foreground crop when floor((i + 1) r) > floor(i r). Foreground
/// crops are centred on a random labelled voxel; background crops prefer
/// windows with no foreground. An empty label map yields background crops and a warning.
CropBatch sample_crops(const Volume& v, const LabelMap& labels, const Shape3& crop_shape, Index count, double foreground_ratio,
                       Rng& rng, std::vector<std::string>* warnings = nullptr, Index first_slot = 0);

/// Window start offsets along one axis of length `length` (>= window).
std::vector<Index> window_starts(Index length, Index window, double overlap);
/// Per-voxel number of windows covering it.
std::vector<int> coverage_map(const Shape3& shape, const Shape3& window, double overlap);

/// Uniformly averaged logits over all windows, [voxels, classes]. A volume
/// smaller than the window is reflect-padded and the result cropped back.
Tensor sliding_window_logits(const ParameterSet& params, const SegmentorConfig& cfg, const Volume& v, double overlap);
LabelMap sliding_window_infer(const ParameterSet& params, const SegmentorConfig& cfg, const Volume& v, double overlap,
                              const std::vector<std::string>& class_names = {});

Volume reflect_pad(const Volume& v, const Shape3& target);

struct LabeledVolume {
  Volume volume;  // prepared intensities
  LabelMap labels;  // task labels
};

struct FinetuneConfig {
  TaskMode task = TaskMode::Organs;
  Index epochs = 200;
  Index patience = 20;        // validation evaluations without improvement
  Index validate_every = 5;
  Index batch_size = 3;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  double foreground_ratio = 0.5;
  double val_overlap = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  Index epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_dice;
};

struct TrainRunRecord {
  std::vector<EpochRecord> epochs;
  std::string shots;  // count or "full"
  Index planned_epochs = 0;
  std::optional<Index> early_stop_epoch;
  Index best_epoch = 0;
  double best_val_dice = 0.0;

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

struct FinetuneResult {
  ParameterSet params;  // best-validation weights
  TrainRunRecord record;
};

FinetuneResult finetune(const SegmentorConfig& scfg, const ParameterSet& init, const FinetuneConfig& cfg,
                        const std::vector<LabeledVolume>& train, const std::vector<LabeledVolume>& val, const std::string& shots_label);

/// First `shots` entries of the seed-shuffled training list (0 = all), so
/// smaller shot sets are prefixes of larger ones.
std::vector<ManifestEntry> select_shots(const DatasetManifest& manifest, Modality modality, Index shots, std::uint64_t seed);

std::vector<LabeledVolume> load_labeled(const std::filesystem::path& dataset_dir, const std::vector<ManifestEntry>& entries, TaskMode task);

/// Mean Dice over `data` (per-volume reports returned through `reports`).
double evaluate_segmentor(const ParameterSet& params, const SegmentorConfig& cfg, const std::vector<LabeledVolume>& data, double overlap,
                          std::vector<DiceReport>* reports = nullptr);

}  // namespace volssl
