#include <algorithm>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "volssl/phantom.hpp"

using namespace volssl;
namespace fs = std::filesystem;

TEST_CASE("phantoms are deterministic and share geometry across modalities") {
  const auto [a1, l1] = generate_phantom(7, Modality::A, {32, 32, 32});
  const auto [a2, l2] = generate_phantom(7, Modality::A, {32, 32, 32});
  const auto [b, lb] = generate_phantom(7, Modality::B, {32, 32, 32});
  CHECK(a1 == a2);
  CHECK(l1 == l2);
  CHECK(l1 == lb);
  CHECK(a1.voxels() != b.voxels());
  CHECK(b.modality() == Modality::B);
}

TEST_CASE("phantom labels hold four organs and a seed-driven tumour") {
  int tumours = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const LabelMap l = generate_phantom(s, Modality::A, {32, 32, 32}).second;
    l.validate();
    std::set<int> present(l.labels.begin(), l.labels.end());
    for (int c = 1; c <= 4; ++c) CHECK(present.count(c) == 1);
    tumours += present.count(phantom_class::kTumor) ? 1 : 0;
  }
  CHECK(tumours >= 35);
  CHECK(tumours <= 65);
}

TEST_CASE("phantoms below the minimum extent are rejected naming the axis") {
  try {
    generate_phantom(0, Modality::A, {32, 8, 32});
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("axis 1") != std::string::npos);
  }
}

TEST_CASE("window normalisation clamps and maps affinely") {
  Volume v({1, 1, 3}, {-600.0, 0.0, 500.0}, Modality::A, "v");
  const Volume n = normalize_intensity(v, -500, 500);
  CHECK(n.voxels()[0] == 0.0);
  CHECK(n.voxels()[1] == 0.5);
  CHECK(n.voxels()[2] == 1.0);
  CHECK_THROWS_AS(normalize_intensity(v, 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("percentile normalisation") {
  std::vector<double> vals(100);
  for (int i = 0; i < 100; ++i) vals[static_cast<std::size_t>(i)] = i;
  Volume v({4, 5, 5}, vals, Modality::B, "v");
  const Volume n = normalize_percentile(v, 5, 95);
  const double p5 = percentile(vals, 5);
  for (int i = 0; i < 100; ++i) {
    if (vals[static_cast<std::size_t>(i)] <= p5) CHECK(n.voxels()[static_cast<std::size_t>(i)] == 0.0);
  }
  std::vector<double> affine(vals);
  for (double& x : affine) x = 3.0 * x - 17.0;
  const Volume m = normalize_percentile(Volume({4, 5, 5}, affine, Modality::B, "w"), 5, 95);
  for (std::size_t i = 0; i < 100; ++i) CHECK(m.voxels()[i] == doctest::Approx(n.voxels()[i]).epsilon(1e-12));

  std::vector<std::string> warnings;
  const Volume c = normalize_percentile(Volume({2, 2, 2}, std::vector<double>(8, 3.0), Modality::B, "c"), 5, 95, &warnings);
  CHECK(std::all_of(c.voxels().begin(), c.voxels().end(), [](double x) { return x == 0.5; }));
  CHECK(warnings.size() == 1);
}

TEST_CASE("volume and label files round-trip") {
  const fs::path dir = fs::temp_directory_path() / "volssl_vol_test";
  fs::create_directories(dir);
  const auto [v, l] = generate_phantom(3, Modality::A, {16, 20, 18});
  write_volume(dir / "v.bin", v, VoxelType::Float64);
  write_labels(dir / "l.bin", l);
  const Volume back = read_volume(dir / "v.bin");
  CHECK(back.voxels() == v.voxels());
  CHECK(back.shape() == v.shape());
  CHECK(read_labels(dir / "l.bin") == l);
  fs::remove_all(dir);
}

TEST_CASE("crop extracts the requested block") {
  const auto [v, l] = generate_phantom(1, Modality::A, {16, 16, 16});
  const Volume c = crop(v, {2, 3, 4}, {5, 6, 7});
  CHECK(c.shape() == Shape3{5, 6, 7});
  CHECK(c.at(1, 2, 3) == v.at(3, 5, 7));
  CHECK_THROWS(crop(v, {12, 0, 0}, {5, 5, 5}));
}

TEST_CASE("manifests keep pretraining and fine-tuning patients disjoint") {
  DatasetConfig cfg;
  cfg.splits = {{Split::Pretrain, Modality::A, 200, {}}, {Split::Train, Modality::B, 40, {}}, {Split::Test, Modality::B, 20, {}}};
  const DatasetManifest m = plan_manifest(cfg);
  CHECK(m.entries.size() == 260);
  std::set<Index> pre, fine;
  for (const auto& e : m.entries) (e.split == Split::Pretrain ? pre : fine).insert(e.pool_index);
  for (Index p : pre) CHECK(fine.count(p) == 0);
  CHECK(plan_manifest(cfg).to_json() == m.to_json());

  DatasetConfig overlap;
  overlap.splits = {{Split::Pretrain, Modality::A, 10, Index{0}}, {Split::Train, Modality::A, 10, Index{5}}};
  CHECK_THROWS_AS(plan_manifest(overlap), std::invalid_argument);

  DatasetConfig too_many;
  too_many.pool_size = 10;
  too_many.splits = {{Split::Pretrain, Modality::A, 11, {}}};
  CHECK_THROWS_AS(plan_manifest(too_many), std::invalid_argument);
}

TEST_CASE("built datasets load back through the manifest") {
  const fs::path dir = fs::temp_directory_path() / "volssl_manifest_test";
  fs::remove_all(dir);
  DatasetConfig cfg;
  cfg.shape = {16, 16, 16};
  cfg.splits = {{Split::Pretrain, Modality::A, 3, {}}, {Split::Train, Modality::A, 2, {}}};
  const DatasetManifest m = build_manifest(cfg, dir);
  const DatasetManifest back = DatasetManifest::load(dir / "manifest.json");
  CHECK(back.to_json() == m.to_json());
  for (const auto& e : back.entries) {
    const auto [v, l] = load_entry(dir, e);
    CHECK(v.shape() == Shape3{16, 16, 16});
    CHECK(l.has_value() == (e.split != Split::Pretrain));
  }
  fs::remove_all(dir);
}
