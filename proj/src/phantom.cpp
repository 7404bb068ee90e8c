#include "volssl/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "volssl/nn.hpp"

namespace volssl {

using nlohmann::json;

const std::vector<std::string>& phantom_class_names() {
  static const std::vector<std::string> names{"background", "large_organ",  "medium_organ_a",
                                              "medium_organ_b", "small_organ", "tumor"};
  return names;
}

namespace {

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;
  std::array<double, 9> rot;  // row-major local->world rotation

  bool contains(const std::array<double, 3>& p) const {
    const double dz = p[0] - center[0], dy = p[1] - center[1], dx = p[2] - center[2];
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      // local = R^T * delta
      const double q = rot[0 * 3 + a] * dz + rot[1 * 3 + a] * dy + rot[2 * 3 + a] * dx;
      s += (q / radii[a]) * (q / radii[a]);
    }
    return s <= 1.0;
  }

  std::array<double, 3> to_world(const std::array<double, 3>& q) const {
    std::array<double, 3> p{};
    for (int r = 0; r < 3; ++r) p[r] = center[r] + rot[r * 3 + 0] * q[0] + rot[r * 3 + 1] * q[1] + rot[r * 3 + 2] * q[2];
    return p;
  }
};

std::array<double, 9> rotation(double yaw, double pitch, double roll) {
  // Axes are (z, y, x); yaw turns the axial (y, x) plane.
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  const double cr = std::cos(roll), sr = std::sin(roll);
  const std::array<double, 9> Rz{1, 0, 0, 0, cy, -sy, 0, sy, cy};
  const std::array<double, 9> Ry{cp, 0, sp, 0, 1, 0, -sp, 0, cp};
  const std::array<double, 9> Rx{cr, -sr, 0, sr, cr, 0, 0, 0, 1};
  auto mm = [](const std::array<double, 9>& a, const std::array<double, 9>& b) {
    std::array<double, 9> c{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
    return c;
  };
  return mm(Rz, mm(Ry, Rx));
}

struct Canonical {
  std::array<double, 3> center;
  std::array<double, 3> radii;
  int label;
};

// Normalised (z, y, x) positions; painted in order so later organs win overlaps.
const Canonical kOrgans[] = {
    {{0.50, 0.42, 0.32}, {0.28, 0.22, 0.20}, phantom_class::kLargeOrgan},
    {{0.50, 0.40, 0.76}, {0.18, 0.13, 0.12}, phantom_class::kMediumOrganA},
    {{0.50, 0.75, 0.62}, {0.17, 0.11, 0.12}, phantom_class::kMediumOrganB},
    {{0.50, 0.74, 0.27}, {0.11, 0.08, 0.08}, phantom_class::kSmallOrgan},
};

// Modality A class means (CT-like units).
constexpr std::array<double, phantom_class::kCount> kMeansA{-200.0, 100.0, 200.0, 0.0, 300.0, 40.0};
constexpr double kRangeB = 400.0;
constexpr double kGammaB = 0.6;
constexpr double kNoiseFraction = 0.05;
constexpr double kBiasAmplitude = 0.2;

std::array<double, phantom_class::kCount> means_for(Modality m) {
  if (m == Modality::A) return kMeansA;
  const auto [lo, hi] = std::minmax_element(kMeansA.begin(), kMeansA.end());
  std::array<double, phantom_class::kCount> out{};
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kRangeB * std::pow((kMeansA[i] - *lo) / (*hi - *lo), kGammaB);
  return out;
}

double range_of(const std::array<double, phantom_class::kCount>& m) {
  const auto [lo, hi] = std::minmax_element(m.begin(), m.end());
  return *hi - *lo;
}

}  // namespace

std::pair<Volume, LabelMap> generate_phantom(std::uint64_t seed, Modality modality, const Shape3& shape) {
  for (int a = 0; a < 3; ++a) {
    if (shape[a] < kMinPhantomExtent) {
      throw std::invalid_argument("phantom shape " + to_string(shape) + " too small: axis " + std::to_string(a) +
                                  " must be >= " + std::to_string(kMinPhantomExtent));
    }
  }
  Rng base(seed);
  Rng geo = base.substream("geometry");
  std::vector<Ellipsoid> organs;
  for (const auto& c : kOrgans) {
    Ellipsoid e{};
    for (int a = 0; a < 3; ++a) {
      e.center[a] = c.center[a] + geo.uniform(-0.1, 0.1);
      e.radii[a] = c.radii[a] * geo.uniform(0.8, 1.2);
    }
    e.rot = rotation(geo.uniform(-M_PI / 6, M_PI / 6), geo.uniform(-0.15, 0.15), geo.uniform(-0.15, 0.15));
    organs.push_back(e);
  }
  const bool has_tumor = geo.coin(0.5);
  std::array<double, 3> tumor_center{};
  const double tumor_radius = geo.uniform(0.05, 0.09);
  {
    // Point in the inner half of the large organ's local ball.
    std::array<double, 3> q{};
    double n2;
    do {
      for (auto& v : q) v = geo.uniform(-1.0, 1.0);
      n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
    } while (n2 > 1.0);
    for (int a = 0; a < 3; ++a) q[a] *= 0.5 * organs[0].radii[a];
    tumor_center = organs[0].to_world(q);
  }

  LabelMap labels{shape, std::vector<int>(static_cast<std::size_t>(volume_of(shape)), 0), phantom_class_names()};
  auto centre = [&](Index d, Index h, Index w) {
    return std::array<double, 3>{(static_cast<double>(d) + 0.5) / static_cast<double>(shape[0]),
                                 (static_cast<double>(h) + 0.5) / static_cast<double>(shape[1]),
                                 (static_cast<double>(w) + 0.5) / static_cast<double>(shape[2])};
  };
  Index tumor_voxels = 0;
  Index nearest = -1;
  double nearest_dist = INFINITY;
  for (Index d = 0; d < shape[0]; ++d)
    for (Index h = 0; h < shape[1]; ++h)
      for (Index w = 0; w < shape[2]; ++w) {
        const auto p = centre(d, h, w);
        int lab = phantom_class::kBackground;
        for (std::size_t o = 0; o < organs.size(); ++o)
          if (organs[o].contains(p)) lab = kOrgans[o].label;
        const Index idx = labels.index(d, h, w);
        if (has_tumor && lab == phantom_class::kLargeOrgan) {
          const double dz = p[0] - tumor_center[0], dy = p[1] - tumor_center[1], dx = p[2] - tumor_center[2];
          const double dist = std::sqrt(dz * dz + dy * dy + dx * dx);
          if (dist <= tumor_radius) {
            lab = phantom_class::kTumor;
            ++tumor_voxels;
          } else if (dist < nearest_dist) {
            nearest_dist = dist;
            nearest = idx;
          }
        }
        labels.labels[static_cast<std::size_t>(idx)] = lab;
      }
  if (has_tumor && tumor_voxels == 0 && nearest >= 0) labels.labels[static_cast<std::size_t>(nearest)] = phantom_class::kTumor;

  const auto means = means_for(modality);
  const double sigma = kNoiseFraction * range_of(means);
  Rng noise = base.substream(modality == Modality::A ? "noise-A" : "noise-B");
  Volume vol(shape, modality, "p" + std::to_string(seed) + "-" + to_string(modality));
  struct Wave {
    double amp;
    std::array<double, 3> freq;
    double phase;
  };
  std::vector<Wave> bias;
  if (modality == Modality::B) {
    Rng bias_rng = base.substream("bias");
    for (int i = 0; i < 3; ++i) {
      Wave wv{};
      wv.amp = bias_rng.uniform(-1.0, 1.0) * kBiasAmplitude / 3.0;
      for (auto& f : wv.freq) f = bias_rng.uniform(0.25, 1.0);
      wv.phase = bias_rng.uniform(0.0, 2.0 * M_PI);
      bias.push_back(wv);
    }
  }
  for (Index d = 0; d < shape[0]; ++d)
    for (Index h = 0; h < shape[1]; ++h)
      for (Index w = 0; w < shape[2]; ++w) {
        double v = means[static_cast<std::size_t>(labels.at(d, h, w))];
        if (!bias.empty()) {
          const auto p = centre(d, h, w);
          double field = 1.0;
          for (const auto& wv : bias)
            field += wv.amp * std::cos(2.0 * M_PI * (wv.freq[0] * p[0] + wv.freq[1] * p[1] + wv.freq[2] * p[2]) + wv.phase);
          v *= field;
        }
        vol.at(d, h, w) = v + sigma * noise.normal();
      }
  return {std::move(vol), std::move(labels)};
}

Volume normalize_intensity(const Volume& v, double low, double high) {
  if (!(low < high)) throw std::invalid_argument("normalize_intensity: window low must be < high");
  std::vector<double> out(v.voxels().size());
  const double span = high - low;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (std::clamp(v.voxels()[i], low, high) - low) / span;
  return v.with_voxels(v.shape(), std::move(out));
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of empty set");
  if (p < 0.0 || p > 100.0) throw std::invalid_argument("percentile outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Volume normalize_percentile(const Volume& v, double p_low, double p_high, std::vector<std::string>* warnings) {
  if (!(0.0 <= p_low && p_low < p_high && p_high <= 100.0)) {
    throw std::invalid_argument("normalize_percentile: require 0 <= p_low < p_high <= 100");
  }
  const double lo = percentile(v.voxels(), p_low);
  const double hi = percentile(v.voxels(), p_high);
  if (!(lo < hi)) {
    if (warnings) warnings->push_back("volume " + v.id() + ": percentile window collapsed; output set to 0.5");
    return v.with_voxels(v.shape(), std::vector<double>(v.voxels().size(), 0.5));
  }
  return normalize_intensity(v, lo, hi);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Pretrain: return "pretrain";
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "pretrain") return Split::Pretrain;
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + s + "' (expected pretrain|train|val|test)");
}

void DatasetManifest::validate() const {
  std::set<std::string> paths;
  std::set<Index> pretrain, finetune;
  for (const auto& e : entries) {
    if (!paths.insert(e.volume_path).second) throw std::invalid_argument("duplicate manifest path " + e.volume_path);
    if (e.label_path && !paths.insert(*e.label_path).second) throw std::invalid_argument("duplicate manifest path " + *e.label_path);
    (e.split == Split::Pretrain ? pretrain : finetune).insert(e.pool_index);
  }
  for (Index p : pretrain) {
    if (finetune.count(p)) {
      throw std::invalid_argument("patient " + std::to_string(p) + " appears in both pretraining and fine-tuning splits");
    }
  }
}

std::vector<ManifestEntry> DatasetManifest::select(Split split, Modality modality) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == split && e.modality == modality) out.push_back(e);
  return out;
}

std::vector<ManifestEntry> DatasetManifest::select(Split split) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == split) out.push_back(e);
  return out;
}

json DatasetManifest::to_json() const {
  json j;
  j["seed"] = seed;
  j["shape"] = shape;
  j["entries"] = json::array();
  for (const auto& e : entries) {
    json je{{"id", e.id},
            {"volume", e.volume_path},
            {"modality", to_string(e.modality)},
            {"split", to_string(e.split)},
            {"pool_index", e.pool_index},
            {"phantom_seed", e.phantom_seed}};
    je["labels"] = e.label_path ? json(*e.label_path) : json(nullptr);
    j["entries"].push_back(je);
  }
  return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.shape = j.at("shape").get<Shape3>();
  for (const auto& je : j.at("entries")) {
    ManifestEntry e;
    e.id = je.at("id").get<std::string>();
    e.volume_path = je.at("volume").get<std::string>();
    if (je.contains("labels") && !je.at("labels").is_null()) e.label_path = je.at("labels").get<std::string>();
    e.modality = modality_from_string(je.at("modality").get<std::string>());
    e.split = split_from_string(je.at("split").get<std::string>());
    e.pool_index = je.value("pool_index", Index{0});
    e.phantom_seed = je.value("phantom_seed", std::uint64_t{0});
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

void DatasetManifest::save(const std::filesystem::path& file) const {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << to_json().dump(2) << "\n";
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot open manifest " + file.string());
  return from_json(json::parse(is));
}

json DatasetConfig::to_json() const {
  json j{{"seed", seed}, {"shape", shape}, {"pool_size", pool_size}, {"splits", json::array()}};
  for (const auto& s : splits) {
    json js{{"split", volssl::to_string(s.split)}, {"modality", volssl::to_string(s.modality)}, {"count", s.count}};
    if (s.pool_start) js["pool_start"] = *s.pool_start;
    j["splits"].push_back(js);
  }
  return j;
}

DatasetConfig DatasetConfig::from_json(const json& j) {
  DatasetConfig c;
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("shape")) c.shape = j.at("shape").get<Shape3>();
  c.pool_size = j.value("pool_size", c.pool_size);
  for (const auto& js : j.at("splits")) {
    SplitRequest r;
    r.split = split_from_string(js.at("split").get<std::string>());
    r.modality = modality_from_string(js.at("modality").get<std::string>());
    r.count = js.at("count").get<Index>();
    if (js.contains("pool_start")) r.pool_start = js.at("pool_start").get<Index>();
    c.splits.push_back(r);
  }
  return c;
}

DatasetManifest plan_manifest(const DatasetConfig& cfg) {
  for (int a = 0; a < 3; ++a) {
    if (cfg.shape[a] < kMinPhantomExtent) throw std::invalid_argument("dataset shape " + to_string(cfg.shape) + " too small");
  }
  struct Range {
    Index start, count;
    Split split;
  };
  std::vector<Range> ranges;
  Index total = 0;
  for (const auto& r : cfg.splits) {
    if (r.count < 0) throw std::invalid_argument("negative split count");
    total += r.count;
  }
  if (total > cfg.pool_size) {
    throw std::invalid_argument("requested " + std::to_string(total) + " phantoms but pool holds " + std::to_string(cfg.pool_size));
  }
  // Explicit ranges first, then auto-allocate after the highest used index.
  Index next = 0;
  for (const auto& r : cfg.splits)
    if (r.pool_start) next = std::max(next, *r.pool_start + r.count);
  DatasetManifest m;
  m.seed = cfg.seed;
  m.shape = cfg.shape;
  for (const auto& r : cfg.splits) {
    const Index start = r.pool_start ? *r.pool_start : next;
    if (!r.pool_start) next += r.count;
    if (start < 0 || start + r.count > cfg.pool_size) {
      throw std::invalid_argument(to_string(r.split) + " range [" + std::to_string(start) + "," +
                                  std::to_string(start + r.count) + ") exceeds phantom pool of " + std::to_string(cfg.pool_size));
    }
    for (const auto& other : ranges) {
      const bool crosses = (other.split == Split::Pretrain) != (r.split == Split::Pretrain);
      const bool overlaps = start < other.start + other.count && other.start < start + r.count;
      if (crosses && overlaps) {
        throw std::invalid_argument("pretraining and fine-tuning patient ranges overlap (" + to_string(other.split) + " vs " +
                                    to_string(r.split) + ")");
      }
    }
    ranges.push_back({start, r.count, r.split});
    for (Index i = 0; i < r.count; ++i) {
      const Index pool = start + i;
      ManifestEntry e;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "p%06lld", static_cast<long long>(pool));
      const std::string stem = std::string(buf) + "_" + to_string(r.modality);
      e.id = stem;
      e.volume_path = "vols/" + stem + ".vol";
      if (r.split != Split::Pretrain) e.label_path = "labels/" + stem + ".lbl";
      e.modality = r.modality;
      e.split = r.split;
      e.pool_index = pool;
      e.phantom_seed = mix_seed(cfg.seed, "phantom-" + std::to_string(pool));
      m.entries.push_back(std::move(e));
    }
  }
  m.validate();
  return m;
}

DatasetManifest build_manifest(const DatasetConfig& cfg, const std::filesystem::path& dir) {
  DatasetManifest m = plan_manifest(cfg);
  std::filesystem::create_directories(dir);
  for (const auto& e : m.entries) {
    auto [raw, lab] = generate_phantom(e.phantom_seed, e.modality, cfg.shape);
    const Volume vol(raw.shape(), std::move(raw.voxels()), e.modality, e.id, raw.spacing());
    write_volume(dir / e.volume_path, vol);
    if (e.label_path) write_labels(dir / *e.label_path, lab, vol.spacing());
  }
  m.save(dir / "manifest.json");
  return m;
}

std::pair<Volume, std::optional<LabelMap>> load_entry(const std::filesystem::path& dir, const ManifestEntry& e) {
  Volume v = read_volume(dir / e.volume_path);
  std::optional<LabelMap> l;
  if (e.label_path) l = read_labels(dir / *e.label_path);
  return {std::move(v), std::move(l)};
}

}  // namespace volssl
