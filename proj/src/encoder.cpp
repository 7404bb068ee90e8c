#include "volssl/encoder.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace volssl {

using nlohmann::json;

namespace {

std::string stage_prefix(const std::string& prefix, int s) { return prefix + "stages." + std::to_string(s) + "."; }
std::string block_prefix(const std::string& prefix, int s, int b) {
  return stage_prefix(prefix, s) + "blocks." + std::to_string(b) + ".";
}
std::string merge_prefix(const std::string& prefix, int s) { return prefix + "merges." + std::to_string(s) + "."; }

Index bias_table_rows(const Shape3& w) { return (2 * w[0] - 1) * (2 * w[1] - 1) * (2 * w[2] - 1); }

// Every array of an encoder as (name, shape); shared by init, validation and counting.
std::vector<std::pair<std::string, std::vector<Index>>> encoder_layout(const EncoderConfig& cfg, const std::string& prefix) {
  std::vector<std::pair<std::string, std::vector<Index>>> out;
  const Index c0 = cfg.embed_dim;
  out.push_back({prefix + "patch_embed.weight", {volume_of(cfg.patch), c0}});
  out.push_back({prefix + "patch_embed.bias", {c0}});
  out.push_back({prefix + "mask_token", {1, c0}});
  for (int s = 0; s < kStages; ++s) {
    const Index c = cfg.stage_channels(s);
    const Index hidden = c * cfg.mlp_ratio;
    for (int b = 0; b < cfg.depths[s]; ++b) {
      const std::string p = block_prefix(prefix, s, b);
      out.push_back({p + "norm1.weight", {c}});
      out.push_back({p + "norm1.bias", {c}});
      out.push_back({p + "attn.qkv.weight", {c, 3 * c}});
      out.push_back({p + "attn.qkv.bias", {3 * c}});
      out.push_back({p + "attn.rel_bias", {bias_table_rows(cfg.stage_window(s)), cfg.heads[s]}});
      out.push_back({p + "attn.proj.weight", {c, c}});
      out.push_back({p + "attn.proj.bias", {c}});
      out.push_back({p + "norm2.weight", {c}});
      out.push_back({p + "norm2.bias", {c}});
      out.push_back({p + "mlp.fc1.weight", {c, hidden}});
      out.push_back({p + "mlp.fc1.bias", {hidden}});
      out.push_back({p + "mlp.fc2.weight", {hidden, c}});
      out.push_back({p + "mlp.fc2.bias", {c}});
    }
    if (s + 1 < kStages) {
      const std::string p = merge_prefix(prefix, s);
      out.push_back({p + "norm.weight", {8 * c}});
      out.push_back({p + "norm.bias", {8 * c}});
      out.push_back({p + "reduction.weight", {8 * c, 2 * c}});
    }
  }
  return out;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void EncoderConfig::validate() const {
  if (embed_dim <= 0) throw std::invalid_argument("encoder: embed_dim must be positive");
  if (mlp_ratio <= 0) throw std::invalid_argument("encoder: mlp_ratio must be positive");
  for (int s = 0; s < kStages; ++s) {
    if (depths[s] <= 0) throw std::invalid_argument("encoder: depths must be positive");
    if (heads[s] <= 0) throw std::invalid_argument("encoder: heads must be positive");
  }
  for (int a = 0; a < 3; ++a) {
    if (patch[a] <= 0 || window[a] <= 0 || input_shape[a] <= 0) throw std::invalid_argument("encoder: non-positive extent");
    if (input_shape[a] % patch[a] != 0) {
      throw std::invalid_argument("encoder: input extent " + std::to_string(input_shape[a]) + " on axis " + std::to_string(a) +
                                  " not divisible by patch " + std::to_string(patch[a]));
    }
    const Index g0 = input_shape[a] / patch[a];
    if (g0 % (Index{1} << (kStages - 1)) != 0) {
      throw std::invalid_argument("encoder: stage-0 grid " + std::to_string(g0) + " on axis " + std::to_string(a) +
                                  " cannot be halved " + std::to_string(kStages - 1) + " times");
    }
  }
  for (int s = 0; s < kStages; ++s) {
    if (stage_channels(s) % heads[s] != 0) {
      throw std::invalid_argument("encoder: heads " + std::to_string(heads[s]) + " do not divide stage " + std::to_string(s) +
                                  " width " + std::to_string(stage_channels(s)));
    }
  }
}

Shape3 EncoderConfig::stage_grid(int stage) const {
  Shape3 g{};
  for (int a = 0; a < 3; ++a) g[a] = input_shape[a] / patch[a] >> stage;
  return g;
}

Shape3 EncoderConfig::stage_window(int stage) const {
  const Shape3 g = stage_grid(stage);
  Shape3 w{};
  for (int a = 0; a < 3; ++a) {
    w[a] = std::min(window[a], g[a]);
    while (g[a] % w[a] != 0) --w[a];
  }
  return w;
}

Shape3 EncoderConfig::block_shift(int stage, int block) const {
  if (block % 2 == 0) return {0, 0, 0};
  const Shape3 g = stage_grid(stage), w = stage_window(stage);
  Shape3 s{};
  for (int a = 0; a < 3; ++a) s[a] = w[a] < g[a] ? w[a] / 2 : 0;
  return s;
}

int EncoderConfig::total_blocks() const {
  int n = 0;
  for (int d : depths) n += d;
  return n;
}

json EncoderConfig::to_json() const {
  return json{{"depths", depths},           {"heads", heads},     {"patch", patch},
              {"window", window},           {"embed_dim", embed_dim}, {"input_shape", input_shape},
              {"mlp_ratio", mlp_ratio}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
  EncoderConfig c;
  if (j.contains("preset")) c = encoder_preset(j.at("preset").get<std::string>());
  if (j.contains("depths")) c.depths = j.at("depths").get<std::array<int, kStages>>();
  if (j.contains("heads")) c.heads = j.at("heads").get<std::array<int, kStages>>();
  if (j.contains("patch")) c.patch = j.at("patch").get<Shape3>();
  if (j.contains("window")) c.window = j.at("window").get<Shape3>();
  if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<Index>();
  if (j.contains("input_shape")) c.input_shape = j.at("input_shape").get<Shape3>();
  if (j.contains("mlp_ratio")) c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.validate();
  return c;
}

std::string EncoderConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(to_json().dump())));
  return buf;
}

EncoderConfig encoder_preset(const std::string& name) {
  EncoderConfig c;
  if (name == "desk") {
    // defaults
  } else if (name == "desk-16") {
    c.input_shape = {16, 16, 16};
  } else if (name == "tiny") {
    c.depths = {2, 1, 1, 1};
    c.heads = {1, 1, 2, 2};
    c.embed_dim = 4;
    c.window = {2, 2, 2};
    c.input_shape = {16, 16, 16};
    c.mlp_ratio = 2;
  } else if (name == "paper-base") {
    c.depths = {2, 2, 8, 2};
    c.heads = {4, 4, 8, 16};
    c.embed_dim = 48;
    c.input_shape = {96, 96, 96};
  } else if (name == "smit-s") {
    c.depths = {2, 2, 18, 2};
    c.heads = {4, 4, 8, 16};
    c.embed_dim = 96;
    c.input_shape = {96, 96, 96};
  } else if (name == "smit-p") {
    c.depths = {2, 2, 40, 4};
    c.heads = {4, 4, 8, 16};
    c.embed_dim = 128;
    c.input_shape = {128, 128, 128};
  } else {
    throw std::invalid_argument("unknown encoder preset '" + name + "'");
  }
  c.validate();
  return c;
}

std::vector<std::string> encoder_preset_names() { return {"tiny", "desk", "desk-16", "paper-base", "smit-s", "smit-p"}; }

std::vector<std::uint8_t> MaskSpec::flags() const {
  std::vector<std::uint8_t> f(static_cast<std::size_t>(volume_of(grid)), 0);
  for (Index i : indices) f[static_cast<std::size_t>(i)] = 1;
  return f;
}

bool MaskSpec::contains(Index i) const { return std::binary_search(indices.begin(), indices.end(), i); }

ParameterSet init_encoder(const EncoderConfig& cfg, Rng& rng, const std::string& prefix) {
  cfg.validate();
  ParameterSet ps;
  for (const auto& [name, shape] : encoder_layout(cfg, prefix)) {
    Tensor t(shape);
    if (ends_with(name, "norm1.weight") || ends_with(name, "norm2.weight") || ends_with(name, "norm.weight")) {
      t.fill(1.0);
    } else if (ends_with(name, ".bias")) {
      // zeros
    } else {
      t = trunc_normal(shape, 0.02, rng);
    }
    ps.add(name, std::move(t));
  }
  return ps;
}

Index parameter_count(const EncoderConfig& cfg) {
  cfg.validate();
  const Index c0 = cfg.embed_dim;
  Index n = volume_of(cfg.patch) * c0 + c0 + c0;
  for (int s = 0; s < kStages; ++s) {
    const Index c = cfg.stage_channels(s);
    const Index hidden = c * cfg.mlp_ratio;
    const Index per_block = 4 * c                         // two layer norms
                            + c * 3 * c + 3 * c           // qkv
                            + bias_table_rows(cfg.stage_window(s)) * cfg.heads[s]
                            + c * c + c                   // proj
                            + c * hidden + hidden + hidden * c + c;
    n += per_block * cfg.depths[s];
    if (s + 1 < kStages) n += 16 * c + 8 * c * 2 * c;
  }
  return n;
}

void require_encoder_params(const EncoderConfig& cfg, const ParameterSet& params, const std::string& prefix) {
  for (const auto& [name, shape] : encoder_layout(cfg, prefix)) {
    if (!params.contains(name)) throw std::invalid_argument("encoder parameters missing layer " + name);
    if (params.at(name).value().shape() != shape) {
      throw std::invalid_argument("encoder parameter " + name + " has shape " + shape_string(params.at(name).value().shape()) +
                                  ", expected " + shape_string(shape));
    }
  }
}

TokenGrid patch_embed(const Var& volume, const Shape3& shape, const EncoderConfig& cfg, const ParameterSet& params,
                      const std::string& prefix) {
  for (int a = 0; a < 3; ++a) {
    if (shape[a] % cfg.patch[a] != 0) {
      throw std::invalid_argument("patch_embed: extent " + std::to_string(shape[a]) + " on axis " + std::to_string(a) +
                                  " not divisible by patch " + std::to_string(cfg.patch[a]));
    }
  }
  if (volume.rows() != volume_of(shape) || volume.cols() != 1) {
    throw std::invalid_argument("patch_embed: volume tensor does not match shape " + to_string(shape));
  }
  const Shape3 grid{shape[0] / cfg.patch[0], shape[1] / cfg.patch[1], shape[2] / cfg.patch[2]};
  Var patches = ag::space_to_depth(volume, shape, cfg.patch);
  Var tokens = ag::linear(patches, params.at(prefix + "patch_embed.weight"), params.at(prefix + "patch_embed.bias"));
  return TokenGrid{tokens, grid, 0};
}

namespace {

Var swin_block(const Var& x, const EncoderConfig& cfg, int s, int b, const ParameterSet& ps, const std::string& prefix) {
  const std::string p = block_prefix(prefix, s, b);
  Var h = ag::layer_norm(x, ps.at(p + "norm1.weight"), ps.at(p + "norm1.bias"));
  Var qkv = ag::linear(h, ps.at(p + "attn.qkv.weight"), ps.at(p + "attn.qkv.bias"));
  const ag::WindowGeometry geom{cfg.stage_grid(s), cfg.stage_window(s), cfg.block_shift(s, b)};
  Var att = ag::window_attention(qkv, geom, cfg.heads[s], ps.at(p + "attn.rel_bias"));
  att = ag::linear(att, ps.at(p + "attn.proj.weight"), ps.at(p + "attn.proj.bias"));
  Var x1 = ag::add(x, att);
  Var h2 = ag::layer_norm(x1, ps.at(p + "norm2.weight"), ps.at(p + "norm2.bias"));
  Var m = ag::gelu(ag::linear(h2, ps.at(p + "mlp.fc1.weight"), ps.at(p + "mlp.fc1.bias")));
  m = ag::linear(m, ps.at(p + "mlp.fc2.weight"), ps.at(p + "mlp.fc2.bias"));
  return ag::add(x1, m);
}

}  // namespace

EncoderOutput encode(const Var& volume, const Shape3& shape, const EncoderConfig& cfg, const ParameterSet& params,
                     const MaskSpec* mask, const std::string& prefix) {
  cfg.validate();
  if (shape != cfg.input_shape) {
    throw std::invalid_argument("encode: input " + to_string(shape) + " differs from configured " + to_string(cfg.input_shape));
  }
  require_encoder_params(cfg, params, prefix);
  TokenGrid t = patch_embed(volume, shape, cfg, params, prefix);
  if (mask) {
    if (mask->grid != t.grid) throw std::invalid_argument("encode: mask grid " + to_string(mask->grid) + " vs " + to_string(t.grid));
    const auto f = mask->flags();
    t.tokens = ag::replace_rows(t.tokens, f, params.at(prefix + "mask_token"));
  }
  EncoderOutput out;
  out.taps.push_back(t);
  Var x = t.tokens;
  for (int s = 0; s < kStages; ++s) {
    const Shape3 g = cfg.stage_grid(s);
    if (s > 0) {
      const Shape3 prev = cfg.stage_grid(s - 1);
      const std::string p = merge_prefix(prefix, s - 1);
      Var merged = ag::space_to_depth(x, prev, {2, 2, 2});
      merged = ag::layer_norm(merged, params.at(p + "norm.weight"), params.at(p + "norm.bias"));
      x = ag::linear(merged, params.at(p + "reduction.weight"));
    }
    for (int b = 0; b < cfg.depths[s]; ++b) {
      x = swin_block(x, cfg, s, b, params, prefix);
      out.taps.push_back(TokenGrid{x, g, s});
    }
    const Index c = x.cols();
    out.stages[s] = TokenGrid{ag::layer_norm(x, ag::constant(Tensor::matrix(1, c, 1.0)), ag::constant(Tensor::matrix(1, c, 0.0))), g, s};
  }
  return out;
}

Var pooled_embedding(const EncoderOutput& features) { return ag::mean_rows(features.stages[kStages - 1].tokens); }

}  // namespace volssl
