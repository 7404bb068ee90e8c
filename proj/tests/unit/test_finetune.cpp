#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "volssl/checkpoint.hpp"
#include "volssl/finetune.hpp"

using namespace volssl;
namespace fs = std::filesystem;

namespace {

SegmentorConfig tiny_segmentor(TaskMode t = TaskMode::Organs) {
  SegmentorConfig c;
  c.encoder = encoder_preset("tiny");
  c.num_classes = task_classes(t);
  c.decoder_base = 4;
  return c;
}

LabeledVolume labeled(std::uint64_t seed, const Shape3& shape, TaskMode t = TaskMode::Organs) {
  auto [v, l] = generate_phantom(seed, Modality::A, shape);
  return {prepare_finetune_volume(v), task_labels(l, t)};
}

}  // namespace

TEST_CASE("task labels merge the tumour into the large organ or binarise it") {
  const LabelMap ph = generate_phantom(3, Modality::A, {32, 32, 32}).second;
  const LabelMap organs = task_labels(ph, TaskMode::Organs);
  const LabelMap tumor = task_labels(ph, TaskMode::Tumor);
  CHECK(organs.num_classes() == 5);
  CHECK(tumor.num_classes() == 2);
  for (std::size_t i = 0; i < ph.labels.size(); ++i) {
    CHECK(tumor.labels[i] == (ph.labels[i] == phantom_class::kTumor ? 1 : 0));
    CHECK(organs.labels[i] == (ph.labels[i] == phantom_class::kTumor ? 1 : ph.labels[i]));
  }
  CHECK_THROWS(task_from_string("liver"));
}

TEST_CASE("segmentor output shape and determinism") {
  const SegmentorConfig cfg = tiny_segmentor();
  Rng r1(0), r2(0);
  const ParameterSet a = build_segmentor(cfg, r1);
  const ParameterSet b = build_segmentor(cfg, r2);
  for (const auto& [n, v] : a.entries()) CHECK(b.at(n).value().storage() == v.value().storage());
  CHECK(a.total_count() == segmentor_parameter_count(cfg));
  const LabeledVolume lv = labeled(1, cfg.encoder.input_shape);
  const Var logits = segmentor_forward(a, cfg, lv.volume);
  CHECK(logits.rows() == volume_of(cfg.encoder.input_shape));
  CHECK(logits.cols() == 5);
}

TEST_CASE("checkpoint initialisation copies the encoder and leaves the decoder fresh") {
  const SegmentorConfig cfg = tiny_segmentor();
  Rng er(1);
  const ParameterSet enc = init_encoder(cfg.encoder, er);
  const fs::path dir = fs::temp_directory_path() / "volssl_seg_ckpt";
  fs::remove_all(dir);
  CheckpointManifest m;
  m.kind = "encoder";
  m.config_hash = cfg.encoder.hash();
  m.encoder_config = cfg.encoder.to_json();
  save_checkpoint(dir, enc, m);
  Rng r(2), fresh(2);
  const ParameterSet seg = build_segmentor(cfg, r, dir);
  const ParameterSet rnd = build_segmentor(cfg, fresh);
  for (const auto& [n, v] : enc.entries()) CHECK(seg.at(n).value().storage() == v.value().storage());
  for (const auto& [n, v] : seg.entries()) {
    if (n.rfind("decoder.", 0) == 0) CHECK(!enc.contains(n));
  }
  CHECK(seg.at("decoder.head.weight").value().storage() == rnd.at("decoder.head.weight").value().storage());

  SegmentorConfig other = cfg;
  other.encoder.embed_dim = 8;
  other.encoder.heads = {2, 2, 2, 2};
  Rng r3(3);
  try {
    build_segmentor(other, r3, dir);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find(cfg.encoder.hash()) != std::string::npos);
    CHECK(std::string(e.what()).find(other.encoder.hash()) != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("segmentation loss examples") {
  const std::vector<int> labels{0, 1, 1, 0};
  Tensor sharp({4, 2});
  for (Index i = 0; i < 4; ++i) sharp[i * 2 + labels[static_cast<std::size_t>(i)]] = 40.0;
  CHECK(seg_loss(ag::constant(sharp), labels, TaskMode::Tumor).value().item() < 1e-6);

  const Var uniform = ag::constant(Tensor({4, 2}, 0.0));
  CHECK(ag::cross_entropy(uniform, labels).value().item() == doctest::Approx(std::log(2.0)));

  Rng rng(4);
  Tensor logits({4, 2});
  for (double& x : logits.values()) x = rng.normal();
  Tensor perm({4, 2});
  const std::vector<Index> p{2, 0, 3, 1};
  std::vector<int> plabels(4);
  for (Index i = 0; i < 4; ++i) {
    plabels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(p[i])];
    for (Index k = 0; k < 2; ++k) perm[i * 2 + k] = logits[p[i] * 2 + k];
  }
  CHECK(seg_loss(ag::constant(perm), plabels, TaskMode::Tumor).value().item() ==
        doctest::Approx(seg_loss(ag::constant(logits), labels, TaskMode::Tumor).value().item()).epsilon(1e-12));
  CHECK_THROWS(seg_loss(ag::constant(logits), std::vector<int>{0, 2, 1, 0}, TaskMode::Tumor));
  CHECK_THROWS(seg_loss(ag::constant(logits), labels, TaskMode::Organs));
}

TEST_CASE("segmentor gradients match finite differences") {
  const SegmentorConfig cfg = tiny_segmentor(TaskMode::Tumor);
  Rng r(5);
  ParameterSet ps = build_segmentor(cfg, r);
  const LabeledVolume lv = labeled(0, cfg.encoder.input_shape, TaskMode::Organs);
  const LabelMap two = task_labels(generate_phantom(0, Modality::A, cfg.encoder.input_shape).second, TaskMode::Organs);
  std::vector<int> lab(two.labels.size());
  std::transform(two.labels.begin(), two.labels.end(), lab.begin(), [](int x) { return x > 0 ? 1 : 0; });
  Rng pick(6);
  const auto res = volssl::testing::grad_check(ps, [&] { return seg_loss(segmentor_forward(ps, cfg, lv.volume), lab, TaskMode::Tumor); }, 20, pick);
  INFO(res.worst);
  CHECK(res.checked == 20);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("crop sampling honours the foreground ratio") {
  const LabeledVolume lv = labeled(7, {32, 32, 32});
  Rng rng(8);
  const CropBatch b = sample_crops(lv.volume, lv.labels, {16, 16, 16}, 10, 0.5, rng);
  CHECK(b.crops.size() == 10);
  int fg = 0;
  for (const auto& c : b.crops) {
    CHECK(c.volume.shape() == Shape3{16, 16, 16});
    fg += c.foreground_sampled ? 1 : 0;
  }
  CHECK(fg == 5);

  const CropBatch many = sample_crops(lv.volume, lv.labels, {8, 8, 8}, 1000, 1.0, rng);
  for (const auto& c : many.crops) {
    const bool any = std::any_of(c.labels.labels.begin(), c.labels.labels.end(), [](int x) { return x > 0; });
    CHECK(any);
    CHECK(c.contains_foreground == any);
  }

  const CropBatch whole = sample_crops(lv.volume, lv.labels, {32, 32, 32}, 1, 0.0, rng);
  CHECK(whole.crops[0].volume.voxels() == lv.volume.voxels());
  CHECK(whole.crops[0].labels.labels == lv.labels.labels);
}

TEST_CASE("empty label maps fall back to background crops with a warning") {
  const LabeledVolume lv = labeled(7, {16, 16, 16});
  LabelMap empty = lv.labels;
  std::fill(empty.labels.begin(), empty.labels.end(), 0);
  Rng rng(9);
  std::vector<std::string> warnings;
  const CropBatch b = sample_crops(lv.volume, empty, {8, 8, 8}, 4, 1.0, rng, &warnings);
  CHECK(b.crops.size() == 4);
  for (const auto& c : b.crops) CHECK(!c.foreground_sampled);
  CHECK(!warnings.empty());
}

TEST_CASE("sliding window offsets and coverage") {
  CHECK(window_starts(32, 16, 0.5) == std::vector<Index>{0, 8, 16});
  CHECK(window_starts(32, 16, 0.0) == std::vector<Index>{0, 16});
  CHECK(window_starts(16, 16, 0.5) == std::vector<Index>{0});
  CHECK(window_starts(20, 16, 0.5) == std::vector<Index>{0, 4});
  CHECK_THROWS(window_starts(32, 16, 1.0));
  for (double ov : {0.0, 0.25, 0.5, 0.75}) {
    const auto cov = coverage_map({20, 33, 16}, {16, 16, 16}, ov);
    CHECK(*std::min_element(cov.begin(), cov.end()) >= 1);
  }
}

TEST_CASE("a single window reproduces the direct forward pass") {
  const SegmentorConfig cfg = tiny_segmentor();
  Rng r(10);
  const ParameterSet ps = build_segmentor(cfg, r);
  const LabeledVolume lv = labeled(2, cfg.encoder.input_shape);
  const Tensor direct = segmentor_forward(ps, cfg, lv.volume).value();
  const Tensor tiled = sliding_window_logits(ps, cfg, lv.volume, 0.5);
  CHECK(tiled.storage() == direct.storage());
  const LabelMap pred = sliding_window_infer(ps, cfg, lv.volume, 0.5);
  for (Index i = 0; i < direct.rows(); ++i) {
    const auto* row = direct.data() + i * 5;
    CHECK(pred.labels[static_cast<std::size_t>(i)] == std::max_element(row, row + 5) - row);
  }
}

TEST_CASE("a constant-logit model yields a uniform label map for any tiling") {
  const SegmentorConfig cfg = tiny_segmentor();
  Rng r(11);
  ParameterSet ps = build_segmentor(cfg, r);
  Var w = ps.at("decoder.head.weight");
  w.mutable_value().fill(0.0);
  Var b = ps.at("decoder.head.bias");
  b.mutable_value() = Tensor({5}, std::vector<double>{0, 0, 3, 0, 0});
  const LabeledVolume lv = labeled(3, {24, 20, 16});
  for (double ov : {0.0, 0.5}) {
    const LabelMap pred = sliding_window_infer(ps, cfg, lv.volume, ov);
    CHECK(pred.shape == lv.volume.shape());
    CHECK(std::all_of(pred.labels.begin(), pred.labels.end(), [](int x) { return x == 2; }));
  }
}

TEST_CASE("reflect padding mirrors without repeating the edge") {
  Volume v({1, 1, 3}, {1.0, 2.0, 3.0}, Modality::A, "r");
  const Volume p = reflect_pad(v, {1, 1, 5});
  CHECK(p.voxels() == std::vector<double>{1, 2, 3, 2, 1});
  CHECK_THROWS(reflect_pad(v, {1, 1, 2}));

  const SegmentorConfig cfg = tiny_segmentor();
  Rng r(12);
  const ParameterSet ps = build_segmentor(cfg, r);
  const LabeledVolume small = labeled(4, {16, 16, 16});
  const Volume cut = crop(small.volume, {0, 0, 0}, {12, 16, 16});
  CHECK(sliding_window_infer(ps, cfg, cut, 0.5).shape == Shape3{12, 16, 16});
}

TEST_CASE("shot sets are nested prefixes") {
  DatasetConfig dc;
  dc.splits = {{Split::Train, Modality::A, 20, {}}, {Split::Train, Modality::B, 20, {}}};
  const DatasetManifest m = plan_manifest(dc);
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto five = select_shots(m, Modality::A, 5, seed);
    const auto ten = select_shots(m, Modality::A, 10, seed);
    const auto all = select_shots(m, Modality::A, 0, seed);
    CHECK(all.size() == 20);
    for (std::size_t i = 0; i < 5; ++i) CHECK(five[i].id == ten[i].id);
    for (std::size_t i = 0; i < 10; ++i) CHECK(ten[i].id == all[i].id);
  }
  auto ids = [&](std::uint64_t seed) {
    std::vector<std::string> out;
    for (const auto& e : select_shots(m, Modality::A, 5, seed)) out.push_back(e.id);
    return out;
  };
  CHECK(ids(0) != ids(1));
  CHECK_THROWS(select_shots(m, Modality::A, 21, 0));
}

TEST_CASE("fine-tuning records epochs and keeps the best validation weights") {
  const SegmentorConfig cfg = tiny_segmentor();
  Rng r(13);
  const ParameterSet init = build_segmentor(cfg, r);
  std::vector<LabeledVolume> train{labeled(20, {16, 16, 16}), labeled(21, {16, 16, 16})};
  std::vector<LabeledVolume> val{labeled(22, {16, 16, 16})};
  FinetuneConfig fc;
  fc.epochs = 0;
  const FinetuneResult none = finetune(cfg, init, fc, train, val, "2");
  CHECK(none.record.epochs.empty());
  for (const auto& [n, v] : init.entries()) CHECK(none.params.at(n).value().storage() == v.value().storage());

  fc.epochs = 6;
  fc.validate_every = 2;
  fc.batch_size = 2;
  fc.lr = 1e-3;
  const FinetuneResult a = finetune(cfg, init, fc, train, val, "2");
  const FinetuneResult b = finetune(cfg, init, fc, train, val, "2");
  REQUIRE(a.record.epochs.size() == 6);
  CHECK(a.record.to_csv() == b.record.to_csv());
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(a.record.epochs[i].epoch == static_cast<Index>(i + 1));
    const bool validated = i == 0 || (i + 1) % 2 == 0;
    CHECK(a.record.epochs[i].val_dice.has_value() == validated);
  }
  CHECK(evaluate_segmentor(a.params, cfg, val, fc.val_overlap) == doctest::Approx(a.record.best_val_dice).epsilon(1e-12));

  fc.epochs = 50;
  fc.validate_every = 1;
  fc.patience = 1;
  fc.lr = 0.0;
  const FinetuneResult stopped = finetune(cfg, init, fc, train, val, "2");
  REQUIRE(stopped.record.early_stop_epoch.has_value());
  CHECK(*stopped.record.early_stop_epoch == 2);
  CHECK(stopped.record.best_epoch == 1);
}

TEST_CASE("finetune config validation and json") {
  FinetuneConfig fc;
  fc.task = TaskMode::Tumor;
  fc.lr = 5e-4;
  const FinetuneConfig back = FinetuneConfig::from_json(fc.to_json());
  CHECK(back.to_json() == fc.to_json());
  fc.val_overlap = 1.0;
  CHECK_THROWS(fc.validate());
  fc = FinetuneConfig{};
  fc.patience = 0;
  CHECK_THROWS(fc.validate());
}
