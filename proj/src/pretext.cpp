#include "volssl/pretext.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "volssl/checkpoint.hpp"

namespace volssl {

using nlohmann::json;

namespace {

const std::string kEnc = "encoder.";
const std::string kProj = "head.proj.";
const std::string kPatch = "head.patch.";
const std::string kContrast = "head.contrast.";
const std::string kDecoder = "head.decoder.";
const std::string kRotation = "head.rotation.";

bool needs_decoder(Method m) {
  return m == Method::SimMIM || m == Method::Inpaint || m == Method::Recon || m == Method::Smit || m == Method::SwinUnetrMulti;
}
bool needs_mask(Method m) {
  return m == Method::SimMIM || m == Method::Inpaint || m == Method::Ibot || m == Method::Smit || m == Method::SwinUnetrMulti;
}
bool needs_views(Method m) {
  return m == Method::Contrastive || m == Method::Dino || m == Method::Ibot || m == Method::Smit || m == Method::SwinUnetrMulti;
}
bool needs_rotation(Method m) { return m == Method::Rotation || m == Method::SwinUnetrMulti; }

void add_linear(ParameterSet& ps, const std::string& name, Index in, Index out, Rng& rng, bool bias = true) {
  ps.add(name + ".weight", trunc_normal({in, out}, 0.02, rng));
  if (bias) ps.add(name + ".bias", Tensor({out}));
}

// fc1 -> GELU -> fc2 -> GELU -> fc3 (bottleneck), then optionally L2 norm and a bias-free last layer.
void add_mlp_head(ParameterSet& ps, const std::string& prefix, Index in, Index hidden, Index bottleneck, Index out, Rng& rng) {
  add_linear(ps, prefix + "fc1", in, hidden, rng);
  add_linear(ps, prefix + "fc2", hidden, hidden, rng);
  add_linear(ps, prefix + "fc3", hidden, bottleneck, rng);
  if (out > 0) add_linear(ps, prefix + "last", bottleneck, out, rng, false);
}

Var mlp_bottleneck(const Var& x, const ParameterSet& ps, const std::string& prefix) {
  Var h = ag::gelu(ag::linear(x, ps.at(prefix + "fc1.weight"), ps.at(prefix + "fc1.bias")));
  h = ag::gelu(ag::linear(h, ps.at(prefix + "fc2.weight"), ps.at(prefix + "fc2.bias")));
  return ag::linear(h, ps.at(prefix + "fc3.weight"), ps.at(prefix + "fc3.bias"));
}

Var distill_head(const Var& x, const ParameterSet& ps, const std::string& prefix) {
  return ag::linear(ag::l2_normalize_rows(mlp_bottleneck(x, ps, prefix)), ps.at(prefix + "last.weight"));
}

// Decoder widths per level, from stage 3 down to the voxel output.
std::vector<Index> decoder_widths(const EncoderConfig& enc) {
  return {enc.stage_channels(3), enc.stage_channels(2), enc.stage_channels(1), enc.stage_channels(0), 1};
}

void add_decoder(ParameterSet& ps, const EncoderConfig& enc, Rng& rng) {
  const auto w = decoder_widths(enc);
  for (int l = 0; l < 4; ++l) {
    const Index factor = l < 3 ? 8 : volume_of(enc.patch);
    add_linear(ps, kDecoder + "up" + std::to_string(l), w[l], factor * w[l + 1], rng);
  }
}

// Transposed-convolution stack (kernel = stride) from stage-3 tokens to voxels.
Var pixel_decoder(const TokenGrid& deep, const EncoderConfig& enc, const ParameterSet& ps) {
  Var x = deep.tokens;
  Shape3 grid = deep.grid;
  for (int l = 0; l < 4; ++l) {
    const std::string p = kDecoder + "up" + std::to_string(l);
    const Shape3 factor = l < 3 ? Shape3{2, 2, 2} : enc.patch;
    x = ag::linear(x, ps.at(p + ".weight"), ps.at(p + ".bias"));
    x = ag::depth_to_space(x, grid, factor);
    for (int a = 0; a < 3; ++a) grid[a] *= factor[a];
    if (l < 3) x = ag::leaky_relu(x);
  }
  return x;
}

Var as_input(const Volume& v) { return ag::constant(v.as_column()); }

EncoderOutput run_encoder(const Volume& v, const EncoderConfig& enc, const ParameterSet& ps, const MaskSpec* mask = nullptr) {
  return encode(as_input(v), v.shape(), enc, ps, mask, kEnc);
}

Var mean_of(const std::vector<Var>& terms) {
  const std::vector<double> w(terms.size(), 1.0 / static_cast<double>(terms.size()));
  return ag::weighted_sum(terms, w);
}

Var masked_rows(const TokenGrid& t, const MaskSpec& mask) { return ag::select_rows(t.tokens, mask.indices); }

// Global and patch head outputs of one model on one view.
struct DistillOut {
  Var global;
  Var patch;
  Var pixels;
};

DistillOut distill_forward(const Volume& view, const MaskSpec* student_mask, const MaskSpec& patch_rows, const EncoderConfig& enc,
                           const ParameterSet& ps, bool want_patch, bool want_pixels) {
  const EncoderOutput out = run_encoder(view, enc, ps, student_mask);
  DistillOut d;
  d.global = distill_head(pooled_embedding(out), ps, kProj);
  if (want_patch) d.patch = distill_head(masked_rows(out.stages[0], patch_rows), ps, kPatch);
  if (want_pixels) d.pixels = pixel_decoder(out.stages[3], enc, ps);
  return d;
}

Tensor stack_values(const std::vector<Var>& rows) {
  NoGradGuard ng;
  return ag::stack_rows(rows).value();
}

double tau_t_of(const MethodConfig& mc, const TeacherStudentState& state) { return teacher_temperature(mc.distill, state.epoch); }

// Shared by iBOT and SMIT: cross-view global distillation and same-view patch distillation.
struct CoDistill {
  Var global;
  Var patch;
  std::vector<Var> pixels;  // student reconstructions per (sample, view)
  Tensor teacher_global;
  Tensor teacher_patch;
};

CoDistill co_distill(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch, const TeacherStudentState& state,
                     bool want_pixels) {
  std::vector<Var> s1, s2, sp1, sp2, t1, t2, tp1, tp2;
  CoDistill r;
  for (const auto& smp : batch.samples) {
    const ViewPair& v = *smp.views;
    DistillOut a = distill_forward(v.view1, &smp.mask, smp.mask, enc, state.student, true, want_pixels);
    DistillOut b = distill_forward(v.view2, &smp.mask2, smp.mask2, enc, state.student, true, want_pixels);
    s1.push_back(a.global);
    s2.push_back(b.global);
    sp1.push_back(a.patch);
    sp2.push_back(b.patch);
    if (want_pixels) {
      r.pixels.push_back(a.pixels);
      r.pixels.push_back(b.pixels);
    }
    NoGradGuard ng;
    DistillOut ta = distill_forward(v.view1, nullptr, smp.mask, enc, state.teacher, true, false);
    DistillOut tb = distill_forward(v.view2, nullptr, smp.mask2, enc, state.teacher, true, false);
    t1.push_back(ta.global);
    t2.push_back(tb.global);
    tp1.push_back(ta.patch);
    tp2.push_back(tb.patch);
  }
  const double tau_t = tau_t_of(mc, state), tau_s = mc.distill.tau_s;
  const Tensor T1 = stack_values(t1), T2 = stack_values(t2), TP1 = stack_values(tp1), TP2 = stack_values(tp2);
  const Var g12 = distill_ce(T1, ag::stack_rows(s2), tau_s, tau_t, state.center_global);
  const Var g21 = distill_ce(T2, ag::stack_rows(s1), tau_s, tau_t, state.center_global);
  const Var p11 = distill_ce(TP1, ag::stack_rows(sp1), tau_s, tau_t, state.center_patch);
  const Var p22 = distill_ce(TP2, ag::stack_rows(sp2), tau_s, tau_t, state.center_patch);
  r.global = mean_of({g12, g21});
  r.patch = mean_of({p11, p22});
  {
    NoGradGuard ng;
    r.teacher_global = ag::stack_rows(std::vector<Var>{ag::constant(T1), ag::constant(T2)}).value();
    r.teacher_patch = ag::stack_rows(std::vector<Var>{ag::constant(TP1), ag::constant(TP2)}).value();
  }
  return r;
}

PretextLoss finish(Var total, std::map<std::string, double> parts) {
  PretextLoss l;
  l.total = std::move(total);
  l.parts = std::move(parts);
  return l;
}

PretextLoss loss_simmim_batch(const EncoderConfig& enc, const PretextBatch& batch, const TeacherStudentState& st) {
  std::vector<Var> terms;
  for (const auto& s : batch.samples) {
    const EncoderOutput out = run_encoder(s.clean, enc, st.student, &s.mask);
    terms.push_back(loss_simmim(pixel_decoder(out.stages[3], enc, st.student), s.clean.as_column(), s.mask, enc.patch));
  }
  Var total = mean_of(terms);
  return finish(total, {{"mim", total.value().item()}});
}

PretextLoss loss_dense_batch(const EncoderConfig& enc, const PretextBatch& batch, const TeacherStudentState& st, bool corrupt) {
  std::vector<Var> terms;
  for (const auto& s : batch.samples) {
    const Volume input = corrupt ? corrupt_masked(s.clean, s.mask, enc.patch) : s.clean;
    const EncoderOutput out = run_encoder(input, enc, st.student);
    const Var pred = pixel_decoder(out.stages[3], enc, st.student);
    terms.push_back(corrupt ? loss_inpaint(pred, s.clean.as_column()) : loss_recon(pred, s.clean.as_column()));
  }
  Var total = mean_of(terms);
  return finish(total, {{corrupt ? "inpaint" : "recon", total.value().item()}});
}

std::vector<int> pair_partners(std::size_t pairs) {
  std::vector<int> p(2 * pairs);
  for (std::size_t i = 0; i < pairs; ++i) {
    p[2 * i] = static_cast<int>(2 * i + 1);
    p[2 * i + 1] = static_cast<int>(2 * i);
  }
  return p;
}

PretextLoss loss_contrastive_batch(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch,
                                   const TeacherStudentState& st) {
  std::vector<Var> rows;
  for (const auto& s : batch.samples) {
    for (const Volume* v : {&s.views->view1, &s.views->view2}) {
      rows.push_back(mlp_bottleneck(pooled_embedding(run_encoder(*v, enc, st.student)), st.student, kContrast));
    }
  }
  Var total = loss_infonce(ag::stack_rows(rows), pair_partners(batch.samples.size()), mc.temperature);
  return finish(total, {{"contrast", total.value().item()}});
}

Var rotation_logits(const Volume& v, const EncoderConfig& enc, const ParameterSet& ps, EncoderOutput* keep = nullptr) {
  EncoderOutput out = run_encoder(v, enc, ps);
  Var logits = ag::linear(pooled_embedding(out), ps.at(kRotation + "weight"), ps.at(kRotation + "bias"));
  if (keep) *keep = std::move(out);
  return logits;
}

PretextLoss loss_rotation_batch(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch, const TeacherStudentState& st) {
  std::vector<Var> rows;
  std::vector<int> labels;
  for (const auto& s : batch.samples) {
    rows.push_back(rotation_logits(apply_rotation(s.clean, s.rotation), enc, st.student));
    labels.push_back(s.rotation);
  }
  Var total = loss_rotation(ag::stack_rows(rows), labels, mc.rotation_classes);
  return finish(total, {{"rot", total.value().item()}});
}

PretextLoss loss_dino_batch(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch, const TeacherStudentState& st) {
  std::vector<Var> s1, s2, t1, t2;
  for (const auto& s : batch.samples) {
    s1.push_back(distill_head(pooled_embedding(run_encoder(s.views->view1, enc, st.student)), st.student, kProj));
    s2.push_back(distill_head(pooled_embedding(run_encoder(s.views->view2, enc, st.student)), st.student, kProj));
    NoGradGuard ng;
    t1.push_back(distill_head(pooled_embedding(run_encoder(s.views->view1, enc, st.teacher)), st.teacher, kProj));
    t2.push_back(distill_head(pooled_embedding(run_encoder(s.views->view2, enc, st.teacher)), st.teacher, kProj));
  }
  const double tau_t = tau_t_of(mc, st);
  const Tensor T1 = stack_values(t1), T2 = stack_values(t2);
  Var total = mean_of({distill_ce(T1, ag::stack_rows(s2), mc.distill.tau_s, tau_t, st.center_global),
                       distill_ce(T2, ag::stack_rows(s1), mc.distill.tau_s, tau_t, st.center_global)});
  PretextLoss l = finish(total, {{"global", total.value().item()}});
  NoGradGuard ng;
  l.teacher_global = ag::stack_rows(std::vector<Var>{ag::constant(T1), ag::constant(T2)}).value();
  return l;
}

void require_batch(const PretextBatch& batch) {
  if (batch.samples.empty()) throw std::invalid_argument("pretext batch is empty");
}

}  // namespace

ParameterSet init_pretext_params(const EncoderConfig& enc, const MethodConfig& mc, Rng& rng) {
  mc.validate();
  Rng enc_rng = rng.substream("encoder");
  Rng head_rng = rng.substream("heads");
  ParameterSet ps = init_encoder(enc, enc_rng, kEnc);
  const Index hidden = 4 * enc.embed_dim;
  const Method m = mc.method;
  if (needs_decoder(m)) add_decoder(ps, enc, head_rng);
  if (uses_teacher(m)) add_mlp_head(ps, kProj, enc.stage_channels(3), hidden, mc.bottleneck_dim, mc.distill.head_output_dim, head_rng);
  if (m == Method::Ibot || m == Method::Smit) {
    add_mlp_head(ps, kPatch, enc.stage_channels(0), hidden, mc.bottleneck_dim, mc.distill.head_output_dim, head_rng);
  }
  if (m == Method::Contrastive || m == Method::SwinUnetrMulti) {
    add_mlp_head(ps, kContrast, enc.stage_channels(3), hidden, mc.bottleneck_dim, 0, head_rng);
  }
  if (needs_rotation(m)) add_linear(ps, "head.rotation", enc.stage_channels(3), mc.rotation_classes, head_rng);
  return ps;
}

TeacherStudentState make_state(const EncoderConfig& enc, const MethodConfig& mc, Rng& rng) {
  TeacherStudentState s;
  s.student = init_pretext_params(enc, mc, rng);
  if (uses_teacher(mc.method)) s.teacher = s.student.clone(false);
  s.center_global = Tensor::matrix(1, mc.distill.head_output_dim);
  s.center_patch = Tensor::matrix(1, mc.distill.head_output_dim);
  return s;
}

PretextBatch make_pretext_batch(const MethodConfig& mc, const EncoderConfig& enc, const std::vector<const Volume*>& sources, Rng& rng,
                                Index id) {
  const Method m = mc.method;
  if (needs_rotation(m) && enc.input_shape[1] != enc.input_shape[2]) {
    throw std::invalid_argument("rotation pretext needs a square axial input plane, got " + to_string(enc.input_shape));
  }
  const Shape3 grid = enc.stage_grid(0);
  PretextBatch b;
  b.id = id;
  for (const Volume* src : sources) {
    PretextSample s;
    s.clean = apply_augmentation(*src, sample_augmentation(src->shape(), enc.input_shape, rng, false), enc.input_shape);
    if (needs_views(m)) s.views = make_view_pair(*src, enc.input_shape, rng);
    if (needs_mask(m)) {
      s.mask = sample_mask(grid, mc.mask_ratio, rng);
      s.mask2 = sample_mask(grid, mc.mask_ratio, rng);
    }
    if (needs_rotation(m)) {
      s.rotation = static_cast<int>(rng.below(mc.rotation_classes));
      s.rotation2 = static_cast<int>(rng.below(mc.rotation_classes));
    }
    b.samples.push_back(std::move(s));
  }
  return b;
}

PretextLoss loss_ibot(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch, const TeacherStudentState& state) {
  require_batch(batch);
  CoDistill c = co_distill(mc, enc, batch, state, false);
  const std::vector<Var> terms{c.global, c.patch};
  const std::vector<double> w{mc.lambda_g, mc.lambda_p};
  PretextLoss l = finish(ag::weighted_sum(terms, w), {{"global", c.global.value().item()}, {"patch", c.patch.value().item()}});
  l.teacher_global = std::move(c.teacher_global);
  l.teacher_patch = std::move(c.teacher_patch);
  return l;
}

PretextLoss loss_smit(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch, const TeacherStudentState& state) {
  require_batch(batch);
  CoDistill c = co_distill(mc, enc, batch, state, true);
  std::vector<Var> mips;
  for (std::size_t i = 0; i < batch.samples.size(); ++i) {
    const auto& s = batch.samples[i];
    mips.push_back(loss_simmim(c.pixels[2 * i], s.views->view1.as_column(), s.mask, enc.patch));
    mips.push_back(loss_simmim(c.pixels[2 * i + 1], s.views->view2.as_column(), s.mask2, enc.patch));
  }
  const Var mip = mean_of(mips);
  const std::vector<Var> terms{mip, c.patch, c.global};
  const std::vector<double> w{1.0, mc.lambda_mpd, mc.lambda_itd};
  PretextLoss l = finish(ag::weighted_sum(terms, w), {{"mip", mip.value().item()},
                                                      {"mpd", c.patch.value().item()},
                                                      {"gtd", c.global.value().item()}});
  l.teacher_global = std::move(c.teacher_global);
  l.teacher_patch = std::move(c.teacher_patch);
  return l;
}

PretextLoss loss_swinunetr_multi(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch,
                                 const TeacherStudentState& state) {
  require_batch(batch);
  std::vector<Var> rot_rows, inpaint_terms, contrast_rows;
  std::vector<int> labels;
  for (const auto& s : batch.samples) {
    const std::array<std::pair<const Volume*, std::pair<int, const MaskSpec*>>, 2> views{
        {{&s.views->view1, {s.rotation, &s.mask}}, {&s.views->view2, {s.rotation2, &s.mask2}}}};
    for (const auto& [view, meta] : views) {
      const Volume rotated = apply_rotation(*view, meta.first);
      EncoderOutput out;
      rot_rows.push_back(rotation_logits(corrupt_masked(rotated, *meta.second, enc.patch), enc, state.student, &out));
      labels.push_back(meta.first);
      inpaint_terms.push_back(loss_inpaint(pixel_decoder(out.stages[3], enc, state.student), rotated.as_column()));
      contrast_rows.push_back(mlp_bottleneck(pooled_embedding(out), state.student, kContrast));
    }
  }
  const Var rot = loss_rotation(ag::stack_rows(rot_rows), labels, mc.rotation_classes);
  const Var inpaint = mean_of(inpaint_terms);
  const Var contrast = loss_infonce(ag::stack_rows(contrast_rows), pair_partners(batch.samples.size()), mc.temperature);
  const std::vector<Var> terms{rot, inpaint, contrast};
  const std::vector<double> w{mc.w_rot, mc.w_inpaint, mc.w_contrast};
  return finish(ag::weighted_sum(terms, w), {{"rot", rot.value().item()},
                                             {"inpaint", inpaint.value().item()},
                                             {"contrast", contrast.value().item()}});
}

PretextLoss compute_pretext_loss(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch,
                                 const TeacherStudentState& state) {
  require_batch(batch);
  switch (mc.method) {
    case Method::SimMIM: return loss_simmim_batch(enc, batch, state);
    case Method::Inpaint: return loss_dense_batch(enc, batch, state, true);
    case Method::Recon: return loss_dense_batch(enc, batch, state, false);
    case Method::Contrastive: return loss_contrastive_batch(mc, enc, batch, state);
    case Method::Rotation: return loss_rotation_batch(mc, enc, batch, state);
    case Method::Dino: return loss_dino_batch(mc, enc, batch, state);
    case Method::Ibot: return loss_ibot(mc, enc, batch, state);
    case Method::Smit: return loss_smit(mc, enc, batch, state);
    case Method::SwinUnetrMulti: return loss_swinunetr_multi(mc, enc, batch, state);
  }
  throw std::invalid_argument("unhandled method");
}

std::string LossReport::csv_header(const std::vector<std::string>& part_names) {
  std::string h = "step,total";
  for (const auto& p : part_names) h += "," + p;
  return h + ",lr,tau_t";
}

std::string LossReport::csv_row() const {
  std::ostringstream os;
  os.precision(17);
  os << step << ',' << total;
  for (const auto& [k, v] : parts) os << ',' << v;
  os << ',' << lr << ',' << tau_t;
  return os.str();
}

LossReport pretrain_step(const MethodConfig& mc, const EncoderConfig& enc, const PretextBatch& batch, TeacherStudentState& state,
                         AdamW& optimizer, const StepSettings& settings, Index step) {
  state.student.zero_grad();
  PretextLoss loss = compute_pretext_loss(mc, enc, batch, state);
  LossReport r;
  r.step = step;
  r.total = loss.total.value().item();
  r.parts = loss.parts;
  r.lr = settings.lr;
  r.tau_t = uses_teacher(mc.method) ? teacher_temperature(mc.distill, state.epoch) : 0.0;
  bool finite = std::isfinite(r.total);
  for (const auto& [k, v] : r.parts) finite = finite && std::isfinite(v);
  if (!finite) {
    std::ostringstream os;
    os << "non-finite " << to_string(mc.method) << " loss at step " << step << " (batch " << batch.id << "): total=" << r.total;
    for (const auto& [k, v] : r.parts) os << ' ' << k << '=' << v;
    throw NonFiniteLoss(os.str());
  }
  backward(loss.total);
  optimizer.step(state.student, settings.lr);
  if (uses_teacher(mc.method)) {
    ema_update(state.teacher, state.student, mc.distill.ema_momentum);
    state.center_global = update_center(state.center_global, loss.teacher_global, mc.distill.center_momentum);
    if (!loss.teacher_patch.empty()) {
      state.center_patch = update_center(state.center_patch, loss.teacher_patch, mc.distill.center_momentum);
    }
  }
  state.epoch += settings.epochs_per_step;
  return r;
}

json PretrainConfig::to_json() const {
  return json{{"method", method.to_json()},
              {"encoder", encoder.to_json()},
              {"steps", steps},
              {"batch_size", batch_size},
              {"warmup_steps", warmup_steps},
              {"optimizer",
               {{"lr", optimizer.lr},
                {"beta1", optimizer.beta1},
                {"beta2", optimizer.beta2},
                {"eps", optimizer.eps},
                {"weight_decay", optimizer.weight_decay},
                {"clip_norm", optimizer.clip_norm}}},
              {"checkpoint_every", checkpoint_every},
              {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const json& j) {
  PretrainConfig c;
  c.method = MethodConfig::from_json(j.at("method"));
  if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j.at("encoder"));
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    c.optimizer.lr = o.value("lr", c.optimizer.lr);
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
    c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
    c.optimizer.clip_norm = o.value("clip_norm", c.optimizer.clip_norm);
  }
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
  if (c.steps < 0 || c.batch_size <= 0 || c.warmup_steps < 0) throw std::invalid_argument("pretrain: invalid step settings");
  return c;
}

PretrainResult pretrain(const PretrainConfig& cfg, const std::vector<Volume>& pool, const std::filesystem::path& out_dir) {
  cfg.encoder.validate();
  cfg.method.validate();
  if (pool.empty()) throw std::invalid_argument("pretrain: empty volume pool");
  Rng root(cfg.seed);
  Rng init_rng = root.substream("init");
  Rng batch_rng = root.substream("batch");
  TeacherStudentState state = make_state(cfg.encoder, cfg.method, init_rng);
  AdamW opt(cfg.optimizer);
  StepSettings settings;
  settings.epochs_per_step = static_cast<double>(cfg.batch_size) / static_cast<double>(pool.size());

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    csv.open(out_dir / "loss.csv");
    if (!csv) throw std::runtime_error("cannot write " + (out_dir / "loss.csv").string());
  }
  auto save = [&](const std::filesystem::path& dir, Index step) {
    CheckpointManifest m;
    m.kind = "pretrain";
    m.config_hash = cfg.encoder.hash();
    m.encoder_config = cfg.encoder.to_json();
    m.step = step;
    m.rng_state = batch_rng.state();
    m.extra = json{{"method", to_string(cfg.method.method)}, {"pretrain_config", cfg.to_json()}};
    save_checkpoint(dir, state.student, m);
  };

  PretrainResult result;
  for (Index step = 0; step < cfg.steps; ++step) {
    std::vector<const Volume*> sources;
    for (Index i = 0; i < cfg.batch_size; ++i) sources.push_back(&pool[static_cast<std::size_t>(batch_rng.below(static_cast<Index>(pool.size())))]);
    const PretextBatch batch = make_pretext_batch(cfg.method, cfg.encoder, sources, batch_rng, step);
    settings.lr = cosine_lr(step, cfg.steps, cfg.warmup_steps, cfg.optimizer.lr);
    LossReport r = pretrain_step(cfg.method, cfg.encoder, batch, state, opt, settings, step);
    if (csv.is_open()) {
      if (step == 0) {
        std::vector<std::string> names;
        for (const auto& [k, v] : r.parts) names.push_back(k);
        csv << LossReport::csv_header(names) << '\n';
      }
      csv << r.csv_row() << '\n';
    }
    result.reports.push_back(std::move(r));
    if (!out_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps) {
      save(out_dir / ("checkpoint-step" + std::to_string(step + 1)), step + 1);
    }
  }
  if (!out_dir.empty()) save(out_dir / "checkpoint", cfg.steps);
  result.params = std::move(state.student);
  return result;
}

}  // namespace volssl
