#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "volssl/finetune.hpp"

namespace volssl {

using nlohmann::json;

void FinetuneConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("finetune: epochs must be non-negative");
  if (patience <= 0) throw std::invalid_argument("finetune: patience must be positive");
  if (validate_every <= 0) throw std::invalid_argument("finetune: validate_every must be positive");
  if (batch_size <= 0) throw std::invalid_argument("finetune: batch_size must be positive");
  if (lr < 0.0) throw std::invalid_argument("finetune: lr must be non-negative");
  if (foreground_ratio < 0.0 || foreground_ratio > 1.0) throw std::invalid_argument("finetune: foreground_ratio must lie in [0, 1]");
  if (!(val_overlap >= 0.0 && val_overlap < 1.0)) throw std::invalid_argument("finetune: val_overlap must lie in [0, 1)");
}

json FinetuneConfig::to_json() const {
  return json{{"task", to_string(task)},
              {"epochs", epochs},
              {"patience", patience},
              {"validate_every", validate_every},
              {"batch_size", batch_size},
              {"lr", lr},
              {"weight_decay", weight_decay},
              {"foreground_ratio", foreground_ratio},
              {"val_overlap", val_overlap},
              {"seed", seed}};
}

FinetuneConfig FinetuneConfig::from_json(const json& j) {
  FinetuneConfig c;
  if (j.contains("task")) c.task = task_from_string(j.at("task").get<std::string>());
  c.epochs = j.value("epochs", c.epochs);
  c.patience = j.value("patience", c.patience);
  c.validate_every = j.value("validate_every", c.validate_every);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.foreground_ratio = j.value("foreground_ratio", c.foreground_ratio);
  c.val_overlap = j.value("val_overlap", c.val_overlap);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string TrainRunRecord::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,val_dice\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.train_loss << ',';
    if (e.val_dice) os << *e.val_dice;
    os << '\n';
  }
  return os.str();
}

json TrainRunRecord::to_json() const {
  json ep = json::array();
  for (const auto& e : epochs) {
    ep.push_back(json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_dice", e.val_dice ? json(*e.val_dice) : json()}});
  }
  return json{{"shots", shots},
              {"planned_epochs", planned_epochs},
              {"early_stop_epoch", early_stop_epoch ? json(*early_stop_epoch) : json()},
              {"best_epoch", best_epoch},
              {"best_val_dice", best_val_dice},
              {"epochs", ep}};
}

double evaluate_segmentor(const ParameterSet& params, const SegmentorConfig& cfg, const std::vector<LabeledVolume>& data, double overlap,
                          std::vector<DiceReport>* reports) {
  if (data.empty()) throw std::invalid_argument("evaluate_segmentor: no volumes");
  const TaskMode task = cfg.num_classes == 2 ? TaskMode::Tumor : TaskMode::Organs;
  double sum = 0.0;
  for (const auto& lv : data) {
    const LabelMap pred = sliding_window_infer(params, cfg, lv.volume, overlap, lv.labels.class_names);
    DiceReport r = dice_report(pred, lv.labels, task_structures(task), lv.volume.id());
    sum += r.mean;
    if (reports) reports->push_back(std::move(r));
  }
  return sum / static_cast<double>(data.size());
}

namespace {

void copy_values(ParameterSet& dst, const ParameterSet& src) {
  for (const auto& [name, v] : dst.entries()) {
    Var d = v;
    d.mutable_value() = src.at(name).value();
  }
}

}  // namespace

FinetuneResult finetune(const SegmentorConfig& scfg, const ParameterSet& init, const FinetuneConfig& cfg,
                        const std::vector<LabeledVolume>& train, const std::vector<LabeledVolume>& val, const std::string& shots_label) {
  scfg.validate();
  cfg.validate();
  if (scfg.num_classes != task_classes(cfg.task)) throw std::invalid_argument("finetune: segmentor class count does not match the task");
  FinetuneResult res;
  res.params = init.clone(true);
  res.record.shots = shots_label;
  res.record.planned_epochs = cfg.epochs;
  if (cfg.epochs == 0) return res;
  if (train.empty()) throw std::invalid_argument("finetune: no training volumes");
  if (val.empty()) throw std::invalid_argument("finetune: validation split is empty");

  Rng root(cfg.seed);
  Rng crop_rng = root.substream("crops");
  Rng order_rng = root.substream("order");
  AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  AdamW opt(oc);
  ParameterSet& params = res.params;
  ParameterSet best = params.clone(false);
  double best_val = -1.0;
  Index since_best = 0;
  const auto n = static_cast<Index>(train.size());
  const Shape3 crop_shape = scfg.encoder.input_shape;

  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    shuffle(order, order_rng);
    double loss_sum = 0.0;
    for (Index start = 0; start < n; start += cfg.batch_size) {
      const Index cnt = std::min(cfg.batch_size, n - start);
      params.zero_grad();
      for (Index j = start; j < start + cnt; ++j) {
        const LabeledVolume& lv = train[static_cast<std::size_t>(order[j])];
        const Index slot = (epoch - 1) * n + j;
        const Crop c = sample_crops(lv.volume, lv.labels, crop_shape, 1, cfg.foreground_ratio, crop_rng, nullptr, slot).crops[0];
        const Var loss = seg_loss(segmentor_forward(params, scfg, c.volume), c.labels.labels, cfg.task);
        loss_sum += loss.value().item();
        backward(ag::scale(loss, 1.0 / static_cast<double>(cnt)));
      }
      opt.step(params, cfg.lr);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    bool stop = false;
    if (epoch == 1 || epoch % cfg.validate_every == 0 || epoch == cfg.epochs) {
      const double v = evaluate_segmentor(params, scfg, val, cfg.val_overlap);
      rec.val_dice = v;
      if (v > best_val) {
        best_val = v;
        res.record.best_epoch = epoch;
        copy_values(best, params);
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        res.record.early_stop_epoch = epoch;
        stop = true;
      }
    }
    res.record.epochs.push_back(rec);
    if (stop) break;
  }
  res.record.best_val_dice = best_val;
  copy_values(params, best);
  return res;
}

std::vector<ManifestEntry> select_shots(const DatasetManifest& manifest, Modality modality, Index shots, std::uint64_t seed) {
  std::vector<ManifestEntry> pool = manifest.select(Split::Train, modality);
  if (shots < 0) throw std::invalid_argument("select_shots: negative shot count");
  if (shots > static_cast<Index>(pool.size())) {
    throw std::invalid_argument("select_shots: " + std::to_string(shots) + " shots exceed the " + std::to_string(pool.size()) +
                                " available training volumes");
  }
  std::sort(pool.begin(), pool.end(), [](const ManifestEntry& a, const ManifestEntry& b) { return a.pool_index < b.pool_index; });
  Rng rng(mix_seed(seed, "shots-" + to_string(modality)));
  shuffle(pool, rng);
  if (shots > 0) pool.resize(static_cast<std::size_t>(shots));
  return pool;
}

std::vector<LabeledVolume> load_labeled(const std::filesystem::path& dataset_dir, const std::vector<ManifestEntry>& entries, TaskMode task) {
  std::vector<LabeledVolume> out;
  for (const auto& e : entries) {
    auto [vol, lab] = load_entry(dataset_dir, e);
    if (!lab) throw std::invalid_argument("manifest entry " + e.id + " has no label map");
    out.push_back(LabeledVolume{prepare_finetune_volume(vol), task_labels(*lab, task)});
  }
  return out;
}

}  // namespace volssl
