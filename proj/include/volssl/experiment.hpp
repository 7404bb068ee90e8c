#pragma once

// Config-driven pipelines: generate -> pretrain -> fine-tune -> evaluate ->
// analyse -> report, plus pretraining-size and capacity sweeps.
//
// Output tree under the run directory:
//   experiment.json                resolved config
//   data/                          dataset manifest and phantoms
//   pretrain/<method>/seed<s>/     loss.csv, checkpoint/, done.json
//   finetune/<model>/<task>-<mod>/shots<k>/seed<s>/
//                                  record.csv, result.json, done.json
//   cka/<method>/seed<s>/          profiles and done.json
//   report.json, plots/

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "volssl/encoder.hpp"
#include "volssl/finetune.hpp"
#include "volssl/pretext.hpp"

namespace volssl {

inline constexpr int kExperimentSchemaVersion = 1;
inline constexpr const char* kOutputEnvVar = "VOLSSL_OUT";

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, std::uint64_t seed, const std::string& what)
      : std::runtime_error("stage " + stage + " (seed " + std::to_string(seed) + ") failed: " + what), stage_(std::move(stage)), seed_(seed) {}
  const std::string& stage() const { return stage_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::string stage_;
  std::uint64_t seed_;
};

struct DatasetBlock {
  Shape3 shape{32, 32, 32};
  Index pretrain = 200;
  Index train = 40;
  Index val = 10;
  Index test = 20;
  std::vector<Modality> modalities{Modality::A, Modality::B};
  Modality pretrain_modality = Modality::A;
};

struct PretrainSettings {
  Index steps = 300;
  Index batch_size = 2;
  Index warmup_steps = 20;
  AdamWConfig optimizer;
};

struct AnalysisToggles {
  bool cka = true;
  bool gaps = true;
  bool wilcoxon = true;
  Index cka_probes = 32;
  Index cka_batch_size = 0;
  Index cka_shots = 5;
  TaskMode cka_task = TaskMode::Organs;
  Modality cka_modality = Modality::A;
};

struct ExperimentConfig {
  int schema_version = kExperimentSchemaVersion;
  std::uint64_t seed = 0;  // dataset seed
  DatasetBlock dataset;
  std::vector<Method> methods;
  bool include_scratch = true;
  std::string encoder_preset = "desk-16";
  EncoderConfig encoder;
  MethodConfig method_options;  // method field ignored
  PretrainSettings pretrain;
  FinetuneConfig finetune;       // task and seed are set per job
  std::vector<TaskMode> tasks{TaskMode::Organs};
  std::vector<Index> shots{5};   // ascending; 0 means every training volume
  std::vector<std::uint64_t> seeds{0};
  Index decoder_base = 16;
  double test_overlap = 0.5;
  std::optional<Index> pretrain_pool_limit;
  AnalysisToggles analysis;
  std::string output_dir;
  nlohmann::json sweep;  // {"kind": "pretrain_size", "sizes": [...]} or {"kind": "capacity", "encoders": [...]}

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& file);
  /// FNV-1a of the canonical JSON.
  std::string hash() const;
  std::vector<std::string> model_names() const;
};

struct RunOptions {
  bool resume = false;
  int jobs = 1;
  std::optional<std::filesystem::path> data_dir;  // reuse an existing dataset
  bool plots = true;
};

/// Root for relative output directories: $VOLSSL_OUT or "runs".
std::filesystem::path default_output_root();

/// Runs every stage and writes report.json (and plots). Returns the report.
nlohmann::json run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, const RunOptions& opts = {});
std::filesystem::path run_experiment(const std::filesystem::path& config_path, const std::optional<std::filesystem::path>& out_dir,
                                     const RunOptions& opts = {});

/// Re-assembles report.json from the persisted job outputs of a finished run.
nlohmann::json assemble_report(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

std::string shots_label(Index shots);

/// Best reference per (task, modality, shots) cell: the model with the highest
/// seed-averaged mean Dice. Ties keep the first model in config order.
struct BestReference {
  std::string model;
  double mean = 0.0;
};
BestReference best_reference(const nlohmann::json& report, const std::string& task, const std::string& modality, const std::string& shots);

/// One pipeline per size. Size 0 is the scratch baseline with no pretraining.
nlohmann::json sweep_pretrain_size(const ExperimentConfig& cfg, const std::vector<Index>& sizes, const std::filesystem::path& out_dir,
                                   const RunOptions& opts = {});
/// One pipeline per encoder config.
nlohmann::json sweep_capacity(const ExperimentConfig& cfg, const std::vector<EncoderConfig>& encoders, const std::filesystem::path& out_dir,
                              const RunOptions& opts = {});
/// Dispatches on cfg.sweep.kind.
nlohmann::json run_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, const RunOptions& opts = {});

struct PlotSummary {
  std::vector<std::filesystem::path> files;  // svg and csv
  std::vector<std::string> notices;          // skipped figures
};

/// Figure types: dice bars, per-structure grouped bars, modality-gap bars with
/// significance stars, validation curves, few-shot gap panel, CKA heatmap and
/// sweep curves. Works on either a benchmark or a sweep report.
PlotSummary emit_plots(const nlohmann::json& report, const std::filesystem::path& dir);

}  // namespace volssl
