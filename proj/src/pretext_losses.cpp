#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "volssl/pretext.hpp"

namespace volssl {

using nlohmann::json;

namespace {

const std::vector<std::pair<Method, std::string>>& method_names() {
  static const std::vector<std::pair<Method, std::string>> names = {
      {Method::SimMIM, "simmim"},     {Method::Inpaint, "inpaint"}, {Method::Recon, "recon"},
      {Method::Contrastive, "contrastive"}, {Method::Rotation, "rotation"}, {Method::Dino, "dino"},
      {Method::Ibot, "ibot"},         {Method::Smit, "smit"},       {Method::SwinUnetrMulti, "swinunetr_multi"}};
  return names;
}

}  // namespace

std::string to_string(Method m) {
  for (const auto& [k, v] : method_names())
    if (k == m) return v;
  throw std::invalid_argument("unknown method");
}

Method method_from_string(const std::string& s) {
  for (const auto& [k, v] : method_names())
    if (v == s) return k;
  throw std::invalid_argument("unknown pretext method '" + s + "'");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> all = [] {
    std::vector<Method> v;
    for (const auto& [k, name] : method_names()) v.push_back(k);
    return v;
  }();
  return all;
}

bool uses_teacher(Method m) { return m == Method::Dino || m == Method::Ibot || m == Method::Smit; }

MaskSpec sample_mask(const Shape3& grid, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("sample_mask: ratio must lie in (0, 1)");
  const Index n = volume_of(grid);
  if (n <= 0) throw std::invalid_argument("sample_mask: empty grid");
  const auto k = static_cast<Index>(std::floor(ratio * static_cast<double>(n)));
  if (k == 0) {
    throw std::invalid_argument("sample_mask: degenerate mask (floor(" + std::to_string(ratio) + " * " + std::to_string(n) + ") = 0)");
  }
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = 0; i < k; ++i) {
    const Index j = i + rng.below(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return MaskSpec{grid, ratio, std::move(idx)};
}

std::vector<double> mask_voxel_weights(const MaskSpec& mask, const Shape3& patch) {
  const Shape3 shape{mask.grid[0] * patch[0], mask.grid[1] * patch[1], mask.grid[2] * patch[2]};
  const auto flags = mask.flags();
  std::vector<double> w(static_cast<std::size_t>(volume_of(shape)), 0.0);
  for (Index d = 0; d < shape[0]; ++d)
    for (Index h = 0; h < shape[1]; ++h)
      for (Index x = 0; x < shape[2]; ++x) {
        const Index t = ((d / patch[0]) * mask.grid[1] + h / patch[1]) * mask.grid[2] + x / patch[2];
        if (flags[t]) w[(d * shape[1] + h) * shape[2] + x] = 1.0;
      }
  return w;
}

Volume corrupt_masked(const Volume& v, const MaskSpec& mask, const Shape3& patch) {
  for (int a = 0; a < 3; ++a) {
    if (mask.grid[a] * patch[a] != v.shape()[a]) throw std::invalid_argument("corrupt_masked: mask does not tile the volume");
  }
  const auto w = mask_voxel_weights(mask, patch);
  std::vector<double> vox = v.voxels();
  for (std::size_t i = 0; i < vox.size(); ++i)
    if (w[i] != 0.0) vox[i] = 0.0;
  return v.with_voxels(v.shape(), std::move(vox));
}

json Augmentation::to_json() const {
  return json{{"origin", origin}, {"flip", flip}, {"scale", scale}, {"shift", shift}};
}

Augmentation sample_augmentation(const Shape3& source, const Shape3& crop, Rng& rng, bool jitter) {
  Augmentation a;
  for (int ax = 0; ax < 3; ++ax) {
    if (crop[ax] > source[ax]) throw std::invalid_argument("crop " + to_string(crop) + " exceeds source " + to_string(source));
    a.origin[ax] = rng.below(source[ax] - crop[ax] + 1);
  }
  if (jitter) {
    for (int ax = 0; ax < 3; ++ax) a.flip[ax] = rng.coin(0.5);
    a.scale = rng.uniform(0.9, 1.1);
    a.shift = rng.uniform(-0.05, 0.05);
  }
  return a;
}

Volume apply_augmentation(const Volume& source, const Augmentation& aug, const Shape3& crop_shape) {
  Volume c = crop(source, aug.origin, crop_shape);
  std::vector<double> out(c.voxels().size());
  for (Index d = 0; d < crop_shape[0]; ++d)
    for (Index h = 0; h < crop_shape[1]; ++h)
      for (Index w = 0; w < crop_shape[2]; ++w) {
        const Index sd = aug.flip[0] ? crop_shape[0] - 1 - d : d;
        const Index sh = aug.flip[1] ? crop_shape[1] - 1 - h : h;
        const Index sw = aug.flip[2] ? crop_shape[2] - 1 - w : w;
        double x = c.at(sd, sh, sw);
        if (aug.scale != 1.0 || aug.shift != 0.0) x = std::clamp(x * aug.scale + aug.shift, 0.0, 1.0);
        out[static_cast<std::size_t>(c.index(d, h, w))] = x;
      }
  return c.with_voxels(crop_shape, std::move(out));
}

ViewPair make_view_pair(const Volume& source, const Shape3& crop_shape, Rng& rng) {
  ViewPair p;
  p.aug1 = sample_augmentation(source.shape(), crop_shape, rng);
  p.aug2 = sample_augmentation(source.shape(), crop_shape, rng);
  p.view1 = apply_augmentation(source, p.aug1, crop_shape);
  p.view2 = apply_augmentation(source, p.aug2, crop_shape);
  return p;
}

namespace {

Volume rotate_once(const Volume& v) {
  const Shape3 s = v.shape();
  const Shape3 r{s[0], s[2], s[1]};
  std::vector<double> out(v.voxels().size());
  for (Index d = 0; d < r[0]; ++d)
    for (Index a = 0; a < r[1]; ++a)
      for (Index b = 0; b < r[2]; ++b) out[static_cast<std::size_t>((d * r[1] + a) * r[2] + b)] = v.at(d, b, s[2] - 1 - a);
  return v.with_voxels(r, std::move(out));
}

}  // namespace

Volume apply_rotation(const Volume& v, int class_id) {
  if (class_id < 0) throw std::invalid_argument("apply_rotation: negative class");
  Volume out = v;
  for (int i = 0; i < class_id % 4; ++i) out = rotate_once(out);
  return out;
}

Var loss_simmim(const Var& pred, const Tensor& target, const MaskSpec& mask, const Shape3& patch) {
  if (mask.indices.empty()) throw std::invalid_argument("loss_simmim: empty mask");
  const auto w = mask_voxel_weights(mask, patch);
  if (static_cast<Index>(w.size()) != pred.rows()) throw std::invalid_argument("loss_simmim: mask does not tile the prediction");
  return ag::weighted_mse(pred, target, w);
}

Var loss_inpaint(const Var& pred, const Tensor& target) {
  const std::vector<double> w(static_cast<std::size_t>(pred.rows()), 1.0);
  return ag::weighted_mse(pred, target, w);
}

Var loss_recon(const Var& pred, const Tensor& target) { return loss_inpaint(pred, target); }

Var loss_infonce(const Var& embeddings, const std::vector<int>& partner, double temperature) {
  if (embeddings.rows() < 2) throw std::invalid_argument("loss_infonce: need N >= 1 positive pairs");
  if (temperature <= 0.0) throw std::invalid_argument("loss_infonce: temperature must be positive");
  const Var z = ag::l2_normalize_rows(embeddings);
  return ag::info_nce(ag::matmul_nt(z, z), partner, temperature);
}

Var loss_rotation(const Var& logits, const std::vector<int>& labels, int classes) {
  if (logits.cols() != classes) {
    throw std::invalid_argument("loss_rotation: logits have " + std::to_string(logits.cols()) + " classes, expected " +
                                std::to_string(classes));
  }
  return ag::cross_entropy(logits, labels);
}

void DistillConfig::validate() const {
  if (tau_s <= 0.0) throw std::invalid_argument("distill: tau_s must be positive");
  if (tau_t_start <= 0.0 || tau_t_end <= 0.0) throw std::invalid_argument("distill: teacher temperatures must be positive");
  if (warmup_epochs < 0.0) throw std::invalid_argument("distill: warmup_epochs must be non-negative");
  if (center_momentum < 0.0 || center_momentum >= 1.0) throw std::invalid_argument("distill: center_momentum must lie in [0, 1)");
  if (ema_momentum < 0.0 || ema_momentum > 1.0) throw std::invalid_argument("distill: ema_momentum must lie in [0, 1]");
  if (head_output_dim <= 0) throw std::invalid_argument("distill: head_output_dim must be positive");
}

json DistillConfig::to_json() const {
  return json{{"tau_s", tau_s},
              {"tau_t_start", tau_t_start},
              {"tau_t_end", tau_t_end},
              {"warmup_epochs", warmup_epochs},
              {"center_momentum", center_momentum},
              {"ema_momentum", ema_momentum},
              {"head_output_dim", head_output_dim}};
}

DistillConfig DistillConfig::from_json(const json& j) {
  DistillConfig c;
  c.tau_s = j.value("tau_s", c.tau_s);
  c.tau_t_start = j.value("tau_t_start", c.tau_t_start);
  c.tau_t_end = j.value("tau_t_end", c.tau_t_end);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.center_momentum = j.value("center_momentum", c.center_momentum);
  c.ema_momentum = j.value("ema_momentum", c.ema_momentum);
  c.head_output_dim = j.value("head_output_dim", c.head_output_dim);
  c.validate();
  return c;
}

double teacher_temperature(const DistillConfig& cfg, double epoch) {
  if (epoch >= cfg.warmup_epochs) return cfg.tau_t_end;
  return cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * epoch / cfg.warmup_epochs;
}

Var distill_ce(const Tensor& teacher_logits, const Var& student_logits, double tau_s, double tau_t, const Tensor& center) {
  if (!teacher_logits.same_shape(student_logits.value())) {
    throw std::invalid_argument("distill_ce: teacher " + shape_string(teacher_logits.shape()) + " vs student " +
                                shape_string(student_logits.value().shape()));
  }
  const Index n = teacher_logits.rows(), k = teacher_logits.cols();
  if (center.size() != k) throw std::invalid_argument("distill_ce: center length " + std::to_string(center.size()) + " vs K " + std::to_string(k));
  Tensor shifted = teacher_logits;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) shifted[i * k + j] -= center[j];
  return ag::soft_cross_entropy(student_logits, softmax_rows(shifted, tau_t), tau_s);
}

void ema_update(ParameterSet& teacher, const ParameterSet& student, double m) {
  if (m < 0.0 || m > 1.0) throw std::invalid_argument("ema_update: momentum must lie in [0, 1]");
  teacher.require_compatible(student);
  for (const auto& [name, tv] : teacher.entries()) {
    Var t = tv;
    double* w = t.mutable_value().data();
    const double* s = student.at(name).value().data();
    const Index n = t.value().size();
    for (Index i = 0; i < n; ++i) w[i] = m * w[i] + (1.0 - m) * s[i];
  }
}

Tensor update_center(const Tensor& center, const Tensor& teacher_logits, double momentum) {
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("update_center: momentum must lie in [0, 1)");
  const Index n = teacher_logits.rows(), k = teacher_logits.cols();
  if (n == 0 || teacher_logits.empty()) throw std::invalid_argument("update_center: empty batch");
  if (center.size() != k) throw std::invalid_argument("update_center: center length mismatch");
  Tensor out = Tensor::matrix(1, k);
  for (Index j = 0; j < k; ++j) {
    double mean = 0.0;
    for (Index i = 0; i < n; ++i) mean += teacher_logits[i * k + j];
    mean /= static_cast<double>(n);
    out[j] = momentum * center[j] + (1.0 - momentum) * mean;
  }
  return out;
}

void MethodConfig::validate() const {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("method: mask_ratio must lie in (0, 1)");
  if (temperature <= 0.0) throw std::invalid_argument("method: temperature must be positive");
  if (rotation_classes < 2 || rotation_classes > 4) throw std::invalid_argument("method: rotation_classes must be 2..4");
  if (bottleneck_dim <= 0) throw std::invalid_argument("method: bottleneck_dim must be positive");
  distill.validate();
}

json MethodConfig::to_json() const {
  return json{{"method", to_string(method)},
              {"mask_ratio", mask_ratio},
              {"temperature", temperature},
              {"lambda_g", lambda_g},
              {"lambda_p", lambda_p},
              {"lambda_mpd", lambda_mpd},
              {"lambda_itd", lambda_itd},
              {"rotation_classes", rotation_classes},
              {"w_rot", w_rot},
              {"w_inpaint", w_inpaint},
              {"w_contrast", w_contrast},
              {"bottleneck_dim", bottleneck_dim},
              {"distill", distill.to_json()}};
}

MethodConfig MethodConfig::from_json(const json& j) {
  MethodConfig c;
  c.method = method_from_string(j.at("method").get<std::string>());
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  c.temperature = j.value("temperature", c.temperature);
  c.lambda_g = j.value("lambda_g", c.lambda_g);
  c.lambda_p = j.value("lambda_p", c.lambda_p);
  c.lambda_mpd = j.value("lambda_mpd", c.lambda_mpd);
  c.lambda_itd = j.value("lambda_itd", c.lambda_itd);
  c.rotation_classes = j.value("rotation_classes", c.rotation_classes);
  c.w_rot = j.value("w_rot", c.w_rot);
  c.w_inpaint = j.value("w_inpaint", c.w_inpaint);
  c.w_contrast = j.value("w_contrast", c.w_contrast);
  c.bottleneck_dim = j.value("bottleneck_dim", c.bottleneck_dim);
  if (j.contains("distill")) c.distill = DistillConfig::from_json(j.at("distill"));
  c.validate();
  return c;
}

}  // namespace volssl
