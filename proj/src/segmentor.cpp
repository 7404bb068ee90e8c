#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "volssl/checkpoint.hpp"
#include "volssl/finetune.hpp"

namespace volssl {

using nlohmann::json;

std::string to_string(TaskMode t) { return t == TaskMode::Organs ? "organs" : "tumor"; }

TaskMode task_from_string(const std::string& s) {
  if (s == "organs") return TaskMode::Organs;
  if (s == "tumor") return TaskMode::Tumor;
  throw std::invalid_argument("unknown task '" + s + "' (expected organs or tumor)");
}

int task_classes(TaskMode t) { return t == TaskMode::Organs ? 5 : 2; }

const std::vector<std::string>& task_structures(TaskMode t) {
  static const std::vector<std::string> organs{"large", "medium_a", "medium_b", "small"};
  static const std::vector<std::string> tumor{"tumor"};
  return t == TaskMode::Organs ? organs : tumor;
}

LabelMap task_labels(const LabelMap& phantom, TaskMode t) {
  LabelMap out;
  out.shape = phantom.shape;
  out.class_names.push_back("background");
  for (const auto& s : task_structures(t)) out.class_names.push_back(s);
  out.labels.resize(phantom.labels.size());
  for (std::size_t i = 0; i < phantom.labels.size(); ++i) {
    const int l = phantom.labels[i];
    if (t == TaskMode::Tumor) {
      out.labels[i] = l == phantom_class::kTumor ? 1 : 0;
    } else {
      out.labels[i] = l == phantom_class::kTumor ? phantom_class::kLargeOrgan : l;
    }
  }
  return out;
}

Volume prepare_finetune_volume(const Volume& raw, std::vector<std::string>* warnings) {
  if (raw.modality() == Modality::A) return normalize_intensity(raw, -175.0, 250.0);
  return normalize_percentile(raw, 5.0, 95.0, warnings);
}

Volume prepare_pretrain_volume(const Volume& raw) {
  if (raw.modality() == Modality::A) return normalize_intensity(raw, -500.0, 500.0);
  return normalize_percentile(raw, 5.0, 95.0);
}

void SegmentorConfig::validate() const {
  encoder.validate();
  if (num_classes < 2) throw std::invalid_argument("segmentor: num_classes must be >= 2");
  if (decoder_base <= 0) throw std::invalid_argument("segmentor: decoder_base must be positive");
}

json SegmentorConfig::to_json() const {
  return json{{"encoder", encoder.to_json()}, {"num_classes", num_classes}, {"decoder_base", decoder_base}};
}

SegmentorConfig SegmentorConfig::from_json(const json& j) {
  SegmentorConfig c;
  if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j.at("encoder"));
  c.num_classes = j.value("num_classes", c.num_classes);
  c.decoder_base = j.value("decoder_base", c.decoder_base);
  c.validate();
  return c;
}

namespace {

const std::string kEnc = "encoder.";

Index level_width(const SegmentorConfig& c, int s) { return c.decoder_base << s; }

void add_conv(ParameterSet& ps, const std::string& name, Index k3, Index cin, Index cout, Rng& rng, bool norm) {
  ps.add(name + ".conv.weight", trunc_normal({k3 * cin, cout}, std::sqrt(2.0 / static_cast<double>(k3 * cin)), rng));
  ps.add(name + ".conv.bias", Tensor({cout}));
  if (norm) {
    ps.add(name + ".norm.weight", Tensor({cout}, 1.0));
    ps.add(name + ".norm.bias", Tensor({cout}));
  }
}

void add_up(ParameterSet& ps, const std::string& name, Index cin, Index cout, Rng& rng) {
  ps.add(name + ".weight", trunc_normal({cin, cout}, std::sqrt(2.0 / static_cast<double>(cin)), rng));
  ps.add(name + ".bias", Tensor({cout}));
}

ParameterSet init_decoder(const SegmentorConfig& c, Rng& rng) {
  ParameterSet ps;
  const EncoderConfig& e = c.encoder;
  add_conv(ps, "decoder.bridge", 27, e.stage_channels(3), level_width(c, 3), rng, false);
  for (int s = 2; s >= 0; --s) {
    const std::string lvl = std::to_string(s);
    add_up(ps, "decoder.up" + lvl, level_width(c, s + 1), 8 * level_width(c, s), rng);
    add_conv(ps, "decoder.level" + lvl, 27, level_width(c, s) + e.stage_channels(s), level_width(c, s), rng, true);
  }
  add_up(ps, "decoder.up_full", level_width(c, 0), volume_of(e.patch) * c.decoder_base, rng);
  add_conv(ps, "decoder.full", 27, c.decoder_base + 1, c.decoder_base, rng, true);
  add_up(ps, "decoder.head", c.decoder_base, c.num_classes, rng);
  return ps;
}

Var conv_block(const Var& x, const Shape3& grid, const ParameterSet& ps, const std::string& name, bool norm) {
  Var y = ag::conv3d(x, grid, ps.at(name + ".conv.weight"), ps.at(name + ".conv.bias"), 3);
  if (norm) y = ag::instance_norm(y, ps.at(name + ".norm.weight"), ps.at(name + ".norm.bias"));
  return ag::leaky_relu(y);
}

Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * n - 2;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

ParameterSet build_segmentor(const SegmentorConfig& cfg, Rng& rng, const ParameterSet& encoder_source) {
  cfg.validate();
  Rng enc_rng = rng.substream("encoder");
  Rng dec_rng = rng.substream("decoder");
  ParameterSet ps = init_encoder(cfg.encoder, enc_rng, kEnc);
  if (encoder_source.size() > 0) {
    for (const auto& [name, var] : ps.entries()) {
      if (!encoder_source.contains(name)) throw std::invalid_argument("encoder source lacks layer " + name);
      const Tensor& src = encoder_source.at(name).value();
      if (src.shape() != var.value().shape()) {
        throw std::invalid_argument("encoder source layer " + name + " has shape " + shape_string(src.shape()) + ", expected " +
                                    shape_string(var.value().shape()));
      }
      Var v = var;
      v.mutable_value() = src;
    }
  }
  ps.merge(init_decoder(cfg, dec_rng));
  return ps;
}

ParameterSet build_segmentor(const SegmentorConfig& cfg, Rng& rng, const std::optional<std::filesystem::path>& checkpoint) {
  if (!checkpoint) return build_segmentor(cfg, rng, ParameterSet{});
  CheckpointManifest m;
  ParameterSet archive = load_checkpoint(*checkpoint, &m);
  const std::string want = cfg.encoder.hash();
  if (m.config_hash != want) {
    throw std::invalid_argument("checkpoint config hash " + m.config_hash + " does not match segmentor encoder hash " + want);
  }
  return build_segmentor(cfg, rng, archive.with_prefix(kEnc));
}

Index segmentor_parameter_count(const SegmentorConfig& cfg) {
  Rng rng(0);
  return parameter_count(cfg.encoder) + init_decoder(cfg, rng).total_count();
}

Var segmentor_forward(const ParameterSet& ps, const SegmentorConfig& cfg, const Volume& v) {
  const EncoderConfig& e = cfg.encoder;
  const Var x0 = ag::constant(v.as_column());
  const EncoderOutput f = encode(x0, v.shape(), e, ps, nullptr, kEnc);
  Var d = conv_block(f.stages[3].tokens, f.stages[3].grid, ps, "decoder.bridge", false);
  for (int s = 2; s >= 0; --s) {
    const std::string lvl = std::to_string(s);
    Var up = ag::linear(d, ps.at("decoder.up" + lvl + ".weight"), ps.at("decoder.up" + lvl + ".bias"));
    up = ag::depth_to_space(up, f.stages[s + 1].grid, {2, 2, 2});
    d = conv_block(ag::concat_cols(up, f.stages[s].tokens), f.stages[s].grid, ps, "decoder.level" + lvl, true);
  }
  Var up = ag::linear(d, ps.at("decoder.up_full.weight"), ps.at("decoder.up_full.bias"));
  up = ag::depth_to_space(up, f.stages[0].grid, e.patch);
  d = conv_block(ag::concat_cols(up, x0), v.shape(), ps, "decoder.full", true);
  return ag::linear(d, ps.at("decoder.head.weight"), ps.at("decoder.head.bias"));
}

Var seg_loss(const Var& logits, std::span<const int> labels, TaskMode mode) {
  const int c = task_classes(mode);
  if (logits.cols() != c) {
    throw std::invalid_argument("seg_loss: " + to_string(mode) + " expects " + std::to_string(c) + " classes, logits have " +
                                std::to_string(logits.cols()));
  }
  std::vector<int> fg;
  for (int k = 1; k < c; ++k) fg.push_back(k);
  const std::vector<Var> terms{ag::cross_entropy(logits, labels), ag::soft_dice(logits, labels, fg, 1e-5)};
  const std::vector<double> w{0.5, 0.5};
  return ag::weighted_sum(terms, w);
}

CropBatch sample_crops(const Volume& v, const LabelMap& labels, const Shape3& crop_shape, Index count, double foreground_ratio, Rng& rng,
                       std::vector<std::string>* warnings, Index first_slot) {
  if (labels.shape != v.shape()) throw std::invalid_argument("sample_crops: label shape differs from volume shape");
  if (foreground_ratio < 0.0 || foreground_ratio > 1.0) throw std::invalid_argument("sample_crops: ratio must lie in [0, 1]");
  for (int a = 0; a < 3; ++a) {
    if (crop_shape[a] <= 0 || crop_shape[a] > v.shape()[a]) {
      throw std::invalid_argument("sample_crops: crop " + to_string(crop_shape) + " exceeds volume " + to_string(v.shape()));
    }
  }
  std::vector<Index> fg;
  for (Index i = 0; i < static_cast<Index>(labels.labels.size()); ++i)
    if (labels.labels[i] != 0) fg.push_back(i);
  const Shape3 s = v.shape();
  auto has_fg = [&](const LabelMap& l) { return std::any_of(l.labels.begin(), l.labels.end(), [](int x) { return x != 0; }); };
  auto random_origin = [&]() {
    Shape3 o{};
    for (int a = 0; a < 3; ++a) o[a] = rng.below(s[a] - crop_shape[a] + 1);
    return o;
  };
  bool warned = false;
  CropBatch batch;
  batch.crop_shape = crop_shape;
  for (Index i = 0; i < count; ++i) {
    const Index slot = first_slot + i;
    bool want_fg = std::floor(static_cast<double>(slot + 1) * foreground_ratio) > std::floor(static_cast<double>(slot) * foreground_ratio);
    if (want_fg && fg.empty()) {
      want_fg = false;
      if (warnings && !warned) warnings->push_back("volume " + v.id() + " has no foreground; sampling background crops");
      warned = true;
    }
    Shape3 origin{};
    if (want_fg) {
      const Index c = fg[static_cast<std::size_t>(rng.below(static_cast<Index>(fg.size())))];
      const Shape3 center{c / (s[1] * s[2]), (c / s[2]) % s[1], c % s[2]};
      for (int a = 0; a < 3; ++a) origin[a] = std::clamp(center[a] - crop_shape[a] / 2, Index{0}, s[a] - crop_shape[a]);
    } else {
      origin = random_origin();
      for (int attempt = 0; attempt < 10 && has_fg(crop(labels, origin, crop_shape)); ++attempt) origin = random_origin();
    }
    Crop c{crop(v, origin, crop_shape), crop(labels, origin, crop_shape), want_fg, false};
    c.contains_foreground = has_fg(c.labels);
    batch.crops.push_back(std::move(c));
  }
  return batch;
}

std::vector<Index> window_starts(Index length, Index window, double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0)) throw std::invalid_argument("sliding window: overlap must lie in [0, 1)");
  if (window <= 0 || length < window) throw std::invalid_argument("sliding window: axis shorter than window");
  const Index stride = std::max<Index>(1, static_cast<Index>(std::floor(static_cast<double>(window) * (1.0 - overlap))));
  std::vector<Index> starts;
  for (Index s = 0; s + window < length; s += stride) starts.push_back(s);
  if (starts.empty() || starts.back() != length - window) starts.push_back(length - window);
  return starts;
}

std::vector<int> coverage_map(const Shape3& shape, const Shape3& window, double overlap) {
  Shape3 padded{};
  for (int a = 0; a < 3; ++a) padded[a] = std::max(shape[a], window[a]);
  std::vector<int> cov(static_cast<std::size_t>(volume_of(shape)), 0);
  const auto sd = window_starts(padded[0], window[0], overlap);
  const auto sh = window_starts(padded[1], window[1], overlap);
  const auto sw = window_starts(padded[2], window[2], overlap);
  for (Index a : sd)
    for (Index b : sh)
      for (Index c : sw)
        for (Index d = a; d < std::min(a + window[0], shape[0]); ++d)
          for (Index h = b; h < std::min(b + window[1], shape[1]); ++h)
            for (Index w = c; w < std::min(c + window[2], shape[2]); ++w) ++cov[(d * shape[1] + h) * shape[2] + w];
  return cov;
}

Volume reflect_pad(const Volume& v, const Shape3& target) {
  const Shape3 s = v.shape();
  for (int a = 0; a < 3; ++a)
    if (target[a] < s[a]) throw std::invalid_argument("reflect_pad: target smaller than volume");
  std::vector<double> out(static_cast<std::size_t>(volume_of(target)));
  for (Index d = 0; d < target[0]; ++d)
    for (Index h = 0; h < target[1]; ++h)
      for (Index w = 0; w < target[2]; ++w)
        out[(d * target[1] + h) * target[2] + w] = v.at(reflect_index(d, s[0]), reflect_index(h, s[1]), reflect_index(w, s[2]));
  return v.with_voxels(target, std::move(out));
}

Tensor sliding_window_logits(const ParameterSet& params, const SegmentorConfig& cfg, const Volume& v, double overlap) {
  NoGradGuard ng;
  const Shape3 win = cfg.encoder.input_shape;
  const Shape3 orig = v.shape();
  Shape3 padded{};
  for (int a = 0; a < 3; ++a) padded[a] = std::max(orig[a], win[a]);
  const Volume src = padded == orig ? v : reflect_pad(v, padded);
  const Index c = cfg.num_classes;
  std::vector<double> acc(static_cast<std::size_t>(volume_of(padded) * c), 0.0);
  std::vector<int> cnt(static_cast<std::size_t>(volume_of(padded)), 0);
  for (Index a : window_starts(padded[0], win[0], overlap))
    for (Index b : window_starts(padded[1], win[1], overlap))
      for (Index e : window_starts(padded[2], win[2], overlap)) {
        const Volume tile = crop(src, {a, b, e}, win);
        const Tensor logits = segmentor_forward(params, cfg, tile).value();
        for (Index d = 0; d < win[0]; ++d)
          for (Index h = 0; h < win[1]; ++h)
            for (Index w = 0; w < win[2]; ++w) {
              const Index t = (d * win[1] + h) * win[2] + w;
              const Index g = ((a + d) * padded[1] + b + h) * padded[2] + e + w;
              for (Index k = 0; k < c; ++k) acc[g * c + k] += logits[t * c + k];
              ++cnt[g];
            }
      }
  Tensor out = Tensor::matrix(volume_of(orig), c);
  for (Index d = 0; d < orig[0]; ++d)
    for (Index h = 0; h < orig[1]; ++h)
      for (Index w = 0; w < orig[2]; ++w) {
        const Index g = (d * padded[1] + h) * padded[2] + w;
        const Index o = (d * orig[1] + h) * orig[2] + w;
        for (Index k = 0; k < c; ++k) out[o * c + k] = acc[g * c + k] / cnt[g];
      }
  return out;
}

LabelMap sliding_window_infer(const ParameterSet& params, const SegmentorConfig& cfg, const Volume& v, double overlap,
                              const std::vector<std::string>& class_names) {
  const Tensor logits = sliding_window_logits(params, cfg, v, overlap);
  const Index c = cfg.num_classes;
  LabelMap out;
  out.shape = v.shape();
  out.class_names = class_names;
  if (out.class_names.empty())
    for (Index k = 0; k < c; ++k) out.class_names.push_back(k == 0 ? "background" : "class" + std::to_string(k));
  out.labels.resize(static_cast<std::size_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) {
    Index best = 0;
    for (Index k = 1; k < c; ++k)
      if (logits[i * c + k] > logits[i * c + best]) best = k;
    out.labels[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace volssl
