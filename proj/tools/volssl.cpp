// volssl command-line driver.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "volssl/checkpoint.hpp"
#include "volssl/cka.hpp"
#include "volssl/experiment.hpp"
#include "volssl/finetune.hpp"
#include "volssl/phantom.hpp"
#include "volssl/plot.hpp"
#include "volssl/pretext.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace volssl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  int jobs = 1;
};

json load_json(const std::string& path) {
  if (path.empty()) throw ConfigError("--config is required");
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
}

template <typename F>
auto parse_config(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

fs::path out_dir(const Common& c, const std::string& fallback) {
  if (!c.out.empty()) return c.out;
  return default_output_root() / fallback;
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

std::vector<Volume> load_split(const fs::path& dir, const DatasetManifest& m, std::optional<Split> split, bool finetune_norm) {
  std::vector<ManifestEntry> e = split ? m.select(*split) : m.entries;
  std::sort(e.begin(), e.end(), [](const ManifestEntry& a, const ManifestEntry& b) { return a.pool_index < b.pool_index; });
  std::vector<Volume> out;
  for (const auto& x : e) {
    Volume v = load_entry(dir, x).first;
    out.push_back(finetune_norm ? prepare_finetune_volume(v) : prepare_pretrain_volume(v));
  }
  return out;
}

int cmd_phantom(const Common& c) {
  DatasetConfig dc = parse_config([&] { return DatasetConfig::from_json(load_json(c.config)); });
  if (c.seed) dc.seed = *c.seed;
  const fs::path out = out_dir(c, "phantoms");
  const DatasetManifest m = build_manifest(dc, out);
  std::cout << "wrote " << m.entries.size() << " volumes to " << out.string() << "\n";
  return 0;
}

// Config: {"dataset": <dir>, "pretrain": PretrainConfig}
int cmd_pretrain(const Common& c) {
  const json j = load_json(c.config);
  PretrainConfig pc = parse_config([&] { return PretrainConfig::from_json(j.at("pretrain")); });
  const fs::path data = parse_config([&] { return fs::path(j.at("dataset").get<std::string>()); });
  if (c.seed) pc.seed = *c.seed;
  const DatasetManifest m = DatasetManifest::load(data / "manifest.json");
  const std::vector<Volume> pool = load_split(data, m, Split::Pretrain, false);
  const fs::path out = out_dir(c, "pretrain");
  const PretrainResult r = pretrain(pc, pool, out);
  std::cout << to_string(pc.method.method) << ": " << r.reports.size() << " steps, final loss " << r.reports.back().total << "\n";
  return 0;
}

// Config: {"dataset": <dir>, "segmentor": {...}, "finetune": {...}, "modality": "A",
//          "shots": 5 | "full", "checkpoint": <pretrain checkpoint dir, optional>}
int cmd_finetune(const Common& c) {
  const json j = load_json(c.config);
  struct Parsed {
    fs::path data;
    SegmentorConfig sc;
    FinetuneConfig fc;
    Modality mod;
    Index shots;
    std::optional<fs::path> ckpt;
  };
  Parsed p = parse_config([&] {
    Parsed q{fs::path(j.at("dataset").get<std::string>()),
             SegmentorConfig::from_json(j.value("segmentor", json::object())),
             FinetuneConfig::from_json(j.value("finetune", json::object())),
             modality_from_string(j.value("modality", std::string("A"))),
             0,
             {}};
    const json s = j.value("shots", json(5));
    q.shots = s.is_string() && s.get<std::string>() == "full" ? 0 : s.get<Index>();
    if (j.contains("checkpoint")) q.ckpt = fs::path(j.at("checkpoint").get<std::string>());
    if (q.sc.num_classes != task_classes(q.fc.task)) q.sc.num_classes = task_classes(q.fc.task);
    return q;
  });
  const std::uint64_t seed = c.seed.value_or(p.fc.seed);
  p.fc.seed = mix_seed(seed, "finetune");
  const DatasetManifest m = DatasetManifest::load(p.data / "manifest.json");
  const auto train = load_labeled(p.data, select_shots(m, p.mod, p.shots, mix_seed(seed, "shots")), p.fc.task);
  const auto val = load_labeled(p.data, m.select(Split::Val, p.mod), p.fc.task);
  Rng rng(mix_seed(seed, "segmentor"));
  const ParameterSet init = build_segmentor(p.sc, rng, p.ckpt);
  const FinetuneResult r = finetune(p.sc, init, p.fc, train, val, shots_label(p.shots));
  const fs::path out = out_dir(c, "finetune");
  write_file(out / "record.csv", r.record.to_csv());
  write_file(out / "record.json", r.record.to_json().dump(2) + "\n");
  CheckpointManifest cm;
  cm.kind = "segmentor";
  cm.config_hash = p.sc.encoder.hash();
  cm.encoder_config = p.sc.encoder.to_json();
  cm.step = r.record.best_epoch;
  cm.extra = json{{"task", to_string(p.fc.task)}, {"num_classes", p.sc.num_classes}, {"decoder_base", p.sc.decoder_base}};
  save_checkpoint(out / "checkpoint", r.params, cm);
  std::cout << "best validation Dice " << r.record.best_val_dice << " at epoch " << r.record.best_epoch << "\n";
  return 0;
}

int cmd_infer(const Common& c, const std::string& ckpt, const std::vector<std::string>& inputs, double overlap) {
  CheckpointManifest cm;
  const ParameterSet params = load_checkpoint(ckpt, &cm);
  if (cm.kind != "segmentor") throw ConfigError("checkpoint " + ckpt + " is a " + cm.kind + " checkpoint, not a segmentor");
  SegmentorConfig sc = parse_config([&] {
    SegmentorConfig s;
    s.encoder = EncoderConfig::from_json(cm.encoder_config);
    s.num_classes = cm.extra.at("num_classes").get<int>();
    s.decoder_base = cm.extra.at("decoder_base").get<Index>();
    return s;
  });
  const TaskMode task = sc.num_classes == 2 ? TaskMode::Tumor : TaskMode::Organs;
  std::vector<std::string> names{"background"};
  for (const auto& s : task_structures(task)) names.push_back(s);
  const fs::path out = out_dir(c, "infer");
  fs::create_directories(out);
  for (const auto& in : inputs) {
    const Volume v = prepare_finetune_volume(read_volume(in));
    const LabelMap pred = sliding_window_infer(params, sc, v, overlap, names);
    const fs::path dst = out / (fs::path(in).stem().string() + ".labels.bin");
    write_labels(dst, pred, v.spacing());
    std::cout << dst.string() << "\n";
  }
  return 0;
}

int cmd_cka(const Common& c, const std::string& a, const std::string& b, const std::string& probes_manifest, const std::vector<int>& taps,
            Index batch_size) {
  const fs::path manifest_path(probes_manifest);
  const DatasetManifest m = DatasetManifest::load(manifest_path);
  const std::vector<Volume> probes = load_split(manifest_path.parent_path(), m, std::nullopt, true);
  CkaOptions o;
  o.taps = taps;
  o.batch_size = batch_size;
  o.partition_seed = c.seed.value_or(0);
  const CKAMatrix r = layerwise_cka(fs::path(a), fs::path(b), probes, o);
  const fs::path out = out_dir(c, "cka");
  write_file(out / "cka.csv", r.to_csv());
  write_file(out / "cka.json", r.to_json().dump(2) + "\n");
  std::vector<std::string> rows, cols{"b"};
  std::vector<std::vector<double>> vals;
  for (std::size_t i = 0; i < r.taps_a.size(); ++i) {
    rows.push_back("t" + std::to_string(r.taps_a[i]));
    vals.push_back({r.values(static_cast<Index>(i), 0)});
  }
  if (!r.is_profile()) {
    cols.clear();
    for (int t : r.taps_b) cols.push_back("t" + std::to_string(t));
    vals.clear();
    for (Index i = 0; i < r.values.rows(); ++i) {
      std::vector<double> row;
      for (Index k = 0; k < r.values.cols(); ++k) row.push_back(r.values(i, k));
      vals.push_back(row);
    }
  }
  plot::write_figure(out / "cka_heatmap", plot::heatmap_svg("Layerwise CKA", rows, cols, vals), plot::heatmap_csv(rows, cols, vals));
  std::cout << r.to_csv();
  return 0;
}

int cmd_report(const Common& c) {
  if (c.out.empty()) throw ConfigError("report needs --out pointing at a finished run directory");
  const fs::path run(c.out);
  const ExperimentConfig cfg = parse_config([&] {
    json j = load_json(c.config.empty() ? (run / "experiment.json").string() : c.config);
    return ExperimentConfig::from_json(j);
  });
  const json report = assemble_report(cfg, run);
  write_file(run / "report.json", report.dump(2) + "\n");
  const PlotSummary ps = emit_plots(report, run / "plots");
  for (const auto& n : ps.notices) std::cerr << "notice: " << n << "\n";
  std::cout << (run / "report.json").string() << "\n";
  return 0;
}

ExperimentConfig experiment_config(const Common& c) {
  ExperimentConfig cfg = parse_config([&] { return ExperimentConfig::from_json(load_json(c.config)); });
  if (c.seed) {
    cfg.seeds = {*c.seed};
    cfg.validate();
  }
  return cfg;
}

fs::path experiment_out(const Common& c, const ExperimentConfig& cfg, const std::string& fallback) {
  if (!c.out.empty()) return c.out;
  if (!cfg.output_dir.empty()) {
    const fs::path p(cfg.output_dir);
    return p.is_absolute() ? p : default_output_root() / p;
  }
  return default_output_root() / fallback;
}

int cmd_run(const Common& c) {
  const ExperimentConfig cfg = experiment_config(c);
  const fs::path out = experiment_out(c, cfg, "experiment");
  RunOptions o;
  o.resume = c.resume;
  o.jobs = c.jobs;
  run_experiment(cfg, out, o);
  std::cout << (out / "report.json").string() << "\n";
  return 0;
}

int cmd_sweep(const Common& c) {
  const ExperimentConfig cfg = experiment_config(c);
  const fs::path out = experiment_out(c, cfg, "sweep");
  RunOptions o;
  o.resume = c.resume;
  o.jobs = c.jobs;
  run_sweep(cfg, out, o);
  std::cout << (out / "report.json").string() << "\n";
  return 0;
}

void add_common(CLI::App* sub, Common& c, bool config_required) {
  auto* opt = sub->add_option("--config", c.config, "JSON config file");
  if (config_required) opt->required();
  sub->add_option("--out", c.out, "output directory (default: $" + std::string(kOutputEnvVar) + "/<command>)");
  sub->add_option("--seed", c.seed, "seed override");
  sub->add_flag("--resume", c.resume, "continue a partial run, skipping completed stages");
  sub->add_option("--jobs", c.jobs, "parallel jobs")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised pretraining and few-shot segmentation benchmark for 3D volumes"};
  app.require_subcommand(1);
  Common c;

  auto* phantom = app.add_subcommand("phantom", "generate a synthetic dataset from a dataset config");
  add_common(phantom, c, true);
  auto* pre = app.add_subcommand("pretrain", "pretrain one method on a generated dataset");
  add_common(pre, c, true);
  auto* ft = app.add_subcommand("finetune", "fine-tune a segmentor");
  add_common(ft, c, true);

  auto* infer = app.add_subcommand("infer", "sliding-window segmentation of volumes");
  add_common(infer, c, false);
  std::string ckpt;
  std::vector<std::string> inputs;
  double overlap = 0.5;
  infer->add_option("--checkpoint", ckpt, "segmentor checkpoint directory")->required();
  infer->add_option("--input", inputs, "volume files")->required();
  infer->add_option("--overlap", overlap, "window overlap in [0, 1)")->check(CLI::Range(0.0, 0.999));

  auto* cka_cmd = app.add_subcommand("cka", "layerwise CKA between two checkpoints");
  add_common(cka_cmd, c, false);
  std::string ca, cb, probes;
  std::vector<int> taps;
  Index batch = 0;
  cka_cmd->add_option("--a", ca, "first checkpoint")->required();
  cka_cmd->add_option("--b", cb, "second checkpoint")->required();
  cka_cmd->add_option("--probes", probes, "probe dataset manifest.json")->required();
  cka_cmd->add_option("--taps", taps, "tap ids (default: all)")->delimiter(',');
  cka_cmd->add_option("--batch-size", batch, "minibatch size (0: one batch)");

  auto* report = app.add_subcommand("report", "rebuild report.json and plots of a finished run");
  add_common(report, c, false);
  auto* run = app.add_subcommand("run", "full pipeline: generate, pretrain, fine-tune, evaluate, analyse");
  add_common(run, c, true);
  auto* sweep = app.add_subcommand("sweep", "pretraining-size or capacity sweep");
  add_common(sweep, c, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*phantom) return cmd_phantom(c);
    if (*pre) return cmd_pretrain(c);
    if (*ft) return cmd_finetune(c);
    if (*infer) return cmd_infer(c, ckpt, inputs, overlap);
    if (*cka_cmd) return cmd_cka(c, ca, cb, probes, taps, batch);
    if (*report) return cmd_report(c);
    if (*run) return cmd_run(c);
    if (*sweep) return cmd_sweep(c);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const StageError& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return kExitStage;
  }
  return kExitConfig;
}
