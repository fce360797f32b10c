#include "advit/vit.hpp"

#include <cmath>

#include "advit/rng.hpp"

namespace advit {

namespace {

Var get_var(const VarMap& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw Error("missing parameter '" + name + "'");
  return it->second;
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias) {
  return t.add_row_vector(t.scale_columns(t.standardize_rows(x), gain), bias);
}

Var mlp(Tape& t, Var x, const BlockVars& b) {
  Var h = t.gelu(t.add_row_vector(t.matmul(x, b.mlp_w1), b.mlp_b1));
  return t.add_row_vector(t.matmul(h, b.mlp_w2), b.mlp_b2);
}

// Channels of each conv in the stack: d/2^(k-1), ..., d/2, d.
std::vector<int> conv_channels(const ModelConfig& c) {
  const int k = static_cast<int>(c.conv_strides.size());
  std::vector<int> out(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out[static_cast<size_t>(i)] = c.d_model >> (k - 1 - i);
  return out;
}

int conv_out_extent(int extent, int stride) {
  // 3x3 kernel, padding 1.
  return (extent + 2 - 3) / stride + 1;
}

Tensor trunc_normal_tensor(const Shape& shape, std::mt19937_64& rng,
                           double sigma = 0.02) {
  Tensor t(shape);
  for (double& v : t.data) v = trunc_normal(rng, sigma);
  return t;
}

}  // namespace

int ModelConfig::mlp_hidden() const {
  return static_cast<int>(std::lround(d_model * mlp_ratio));
}

int ModelConfig::grid_h() const {
  if (patch_embed == PatchEmbedKind::Linear) return image_h / patch_size;
  int h = image_h;
  for (int s : conv_strides) h = conv_out_extent(h, s);
  return h;
}

int ModelConfig::grid_w() const {
  if (patch_embed == PatchEmbedKind::Linear) return image_w / patch_size;
  int w = image_w;
  for (int s : conv_strides) w = conv_out_extent(w, s);
  return w;
}

void ModelConfig::validate() const {
  if (depth < 1) throw Error("model: depth must be >= 1");
  if (d_model < 1) throw Error("model: d_model must be >= 1");
  if (heads < 1) throw Error("model: heads must be >= 1");
  if (d_model % heads != 0) {
    throw Error("model: d_model " + std::to_string(d_model) +
                " not divisible by heads " + std::to_string(heads));
  }
  if (num_classes < 2) throw Error("model: num_classes must be >= 2");
  if (image_h < 1 || image_w < 1 || image_c < 1) {
    throw Error("model: image extents must be positive");
  }
  if (mlp_ratio <= 0.0 || mlp_hidden() < 1) {
    throw Error("model: mlp_ratio must yield a positive hidden width");
  }
  if (patch_embed == PatchEmbedKind::Linear) {
    if (patch_size < 1) throw Error("model: patch_size must be >= 1");
    if (image_h % patch_size != 0 || image_w % patch_size != 0) {
      throw Error("model: image " + std::to_string(image_h) + "x" +
                  std::to_string(image_w) + " not divisible by patch_size " +
                  std::to_string(patch_size));
    }
  } else {
    if (conv_strides.empty()) {
      throw Error("model: conv-stack embedding needs at least one stride");
    }
    for (int s : conv_strides) {
      if (s < 1) throw Error("model: conv strides must be >= 1");
    }
    const int k = static_cast<int>(conv_strides.size());
    if (k > 1 && d_model % (1 << (k - 1)) != 0) {
      throw Error("model: d_model " + std::to_string(d_model) +
                  " not divisible by 2^" + std::to_string(k - 1) +
                  " for the conv channel progression");
    }
    if (grid_h() < 1 || grid_w() < 1) {
      throw Error("model: conv stack collapses the token grid to nothing");
    }
  }
  if (has_class_stage()) {
    if (class_attention_depth < 1) {
      throw Error("model: class_attention_depth must be >= 1");
    }
    if (!layerscale_init.has_value()) {
      throw Error("model: layerscale_init required for this block kind");
    }
  } else if (layerscale_init.has_value()) {
    throw Error("model: layerscale_init only applies to class-attention or "
                "cross-covariance models");
  }
}

double default_layerscale_init(BlockKind kind, int depth) {
  if (kind == BlockKind::CrossCovariance && depth <= 12) return 1.0;
  if (depth <= 18) return 0.1;
  if (depth <= 24) return 1e-5;
  return 1e-6;
}

Tensor sinusoidal_table(int tokens, int dim) {
  if (tokens < 1 || dim < 1) {
    throw Error("sinusoidal_table: extents must be positive");
  }
  Tensor t(Shape{tokens, dim});
  for (int pos = 0; pos < tokens; ++pos) {
    for (int j = 0; j < dim; ++j) {
      const int pair = j / 2;
      const double freq = std::pow(10000.0, -2.0 * pair / dim);
      const double angle = pos * freq;
      t(pos, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return t;
}

Params init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  auto rng = make_rng(derive_seed(seed, 0xAD17));
  const int d = config.d_model;
  const int hidden = config.mlp_hidden();
  Params p;

  if (config.patch_embed == PatchEmbedKind::Linear) {
    const int in = config.patch_size * config.patch_size * config.image_c;
    p["patch.lin.w"] = trunc_normal_tensor(Shape{in, d}, rng);
    p["patch.lin.b"] = Tensor(Shape{d}, 0.0);
  } else {
    const auto channels = conv_channels(config);
    int cin = config.image_c;
    for (size_t i = 0; i < channels.size(); ++i) {
      const std::string base = "patch.conv" + std::to_string(i) + ".";
      p[base + "w"] =
          trunc_normal_tensor(Shape{3, 3, cin, channels[i]}, rng);
      p[base + "b"] = Tensor(Shape{channels[i]}, 0.0);
      cin = channels[i];
    }
  }
  if (config.pos_encoding == PosEncodingKind::Learned) {
    p["pos"] = trunc_normal_tensor(Shape{config.token_count(), d}, rng);
  }
  p["cls"] = trunc_normal_tensor(Shape{1, d}, rng);

  const double ls = config.layerscale_init.value_or(0.0);
  auto make_block = [&](const std::string& prefix, bool class_stage) {
    p[prefix + "ln1.g"] = Tensor(Shape{d}, 1.0);
    p[prefix + "ln1.b"] = Tensor(Shape{d}, 0.0);
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      p[prefix + "attn." + w] = trunc_normal_tensor(Shape{d, d}, rng);
    }
    for (const char* b : {"bq", "bk", "bv", "bo"}) {
      p[prefix + "attn." + b] = Tensor(Shape{d}, 0.0);
    }
    if (!class_stage && config.block_kind == BlockKind::CrossCovariance) {
      p[prefix + "attn.tau_log"] = Tensor(Shape{config.heads}, 0.0);
      p[prefix + "lpi.ln.g"] = Tensor(Shape{d}, 1.0);
      p[prefix + "lpi.ln.b"] = Tensor(Shape{d}, 0.0);
      p[prefix + "lpi.dw1.w"] = trunc_normal_tensor(Shape{3, 3, d}, rng);
      p[prefix + "lpi.dw1.b"] = Tensor(Shape{d}, 0.0);
      p[prefix + "lpi.norm.g"] = Tensor(Shape{d}, 1.0);
      p[prefix + "lpi.norm.b"] = Tensor(Shape{d}, 0.0);
      p[prefix + "lpi.dw2.w"] = trunc_normal_tensor(Shape{3, 3, d}, rng);
      p[prefix + "lpi.dw2.b"] = Tensor(Shape{d}, 0.0);
      p[prefix + "ls3"] = Tensor(Shape{d}, ls);
    }
    if (config.has_class_stage()) {
      p[prefix + "ls1"] = Tensor(Shape{d}, ls);
      p[prefix + "ls2"] = Tensor(Shape{d}, ls);
    }
    p[prefix + "ln2.g"] = Tensor(Shape{d}, 1.0);
    p[prefix + "ln2.b"] = Tensor(Shape{d}, 0.0);
    p[prefix + "mlp.w1"] = trunc_normal_tensor(Shape{d, hidden}, rng);
    p[prefix + "mlp.b1"] = Tensor(Shape{hidden}, 0.0);
    p[prefix + "mlp.w2"] = trunc_normal_tensor(Shape{hidden, d}, rng);
    p[prefix + "mlp.b2"] = Tensor(Shape{d}, 0.0);
  };

  for (int i = 0; i < config.depth; ++i) {
    make_block("blocks." + std::to_string(i) + ".", false);
  }
  if (config.has_class_stage()) {
    for (int j = 0; j < config.class_attention_depth; ++j) {
      make_block("cablocks." + std::to_string(j) + ".", true);
    }
  }
  p["norm.g"] = Tensor(Shape{d}, 1.0);
  p["norm.b"] = Tensor(Shape{d}, 0.0);
  p["head.w"] = trunc_normal_tensor(Shape{d, config.num_classes}, rng);
  p["head.b"] = Tensor(Shape{config.num_classes}, 0.0);
  return p;
}

VarMap bind_params(Tape& tape, const Params& params, bool requires_grad) {
  VarMap out;
  for (const auto& [name, tensor] : params) {
    out[name] = tape.leaf(tensor, requires_grad, name);
  }
  return out;
}

BlockVars block_vars(const VarMap& vars, const std::string& prefix,
                     const ModelConfig& config, bool class_stage) {
  BlockVars b;
  b.attn.wq = get_var(vars, prefix + "attn.wq");
  b.attn.bq = get_var(vars, prefix + "attn.bq");
  b.attn.wk = get_var(vars, prefix + "attn.wk");
  b.attn.bk = get_var(vars, prefix + "attn.bk");
  b.attn.wv = get_var(vars, prefix + "attn.wv");
  b.attn.bv = get_var(vars, prefix + "attn.bv");
  b.attn.wo = get_var(vars, prefix + "attn.wo");
  b.attn.bo = get_var(vars, prefix + "attn.bo");
  b.ln1_g = get_var(vars, prefix + "ln1.g");
  b.ln1_b = get_var(vars, prefix + "ln1.b");
  b.ln2_g = get_var(vars, prefix + "ln2.g");
  b.ln2_b = get_var(vars, prefix + "ln2.b");
  b.mlp_w1 = get_var(vars, prefix + "mlp.w1");
  b.mlp_b1 = get_var(vars, prefix + "mlp.b1");
  b.mlp_w2 = get_var(vars, prefix + "mlp.w2");
  b.mlp_b2 = get_var(vars, prefix + "mlp.b2");
  if (config.has_class_stage()) {
    b.ls_attn = get_var(vars, prefix + "ls1");
    b.ls_mlp = get_var(vars, prefix + "ls2");
  }
  if (!class_stage && config.block_kind == BlockKind::CrossCovariance) {
    b.tau_log = get_var(vars, prefix + "attn.tau_log");
    b.lpi_ln_g = get_var(vars, prefix + "lpi.ln.g");
    b.lpi_ln_b = get_var(vars, prefix + "lpi.ln.b");
    b.lpi_dw1_w = get_var(vars, prefix + "lpi.dw1.w");
    b.lpi_dw1_b = get_var(vars, prefix + "lpi.dw1.b");
    b.lpi_norm_g = get_var(vars, prefix + "lpi.norm.g");
    b.lpi_norm_b = get_var(vars, prefix + "lpi.norm.b");
    b.lpi_dw2_w = get_var(vars, prefix + "lpi.dw2.w");
    b.lpi_dw2_b = get_var(vars, prefix + "lpi.dw2.b");
    b.ls_lpi = get_var(vars, prefix + "ls3");
  }
  return b;
}

Var scaled_dot_product_attention(Tape& t, Var q, Var k, Var v) {
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const Tensor& vv = t.value(v);
  if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2) {
    throw Error("attention: operands must be rank-2 token matrices");
  }
  if (qv.shape[1] != kv.shape[1]) {
    throw Error("attention: query/key width mismatch " + shape_str(qv.shape) +
                " vs " + shape_str(kv.shape));
  }
  if (kv.shape[0] != vv.shape[0]) {
    throw Error("attention: key/value token count mismatch " +
                shape_str(kv.shape) + " vs " + shape_str(vv.shape));
  }
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(qv.shape[1]));
  Var scores = t.scale(t.matmul(q, k, false, true), inv_sqrt_dk);
  return t.matmul(t.softmax_rows(scores), v);
}

namespace {

struct Projected {
  Var q, k, v;
};

Projected project_qkv(Tape& t, Var xq, Var xkv, const AttentionParams& p) {
  Projected out;
  out.q = t.add_row_vector(t.matmul(xq, p.wq), p.bq);
  out.k = t.add_row_vector(t.matmul(xkv, p.wk), p.bk);
  out.v = t.add_row_vector(t.matmul(xkv, p.wv), p.bv);
  return out;
}

Var head_slice(Tape& t, Var x, int head, int dh) {
  return t.slice_columns(x, head * dh, (head + 1) * dh);
}

}  // namespace

Var multi_head_self_attention(Tape& t, Var x, const AttentionParams& p,
                              int heads) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 2) throw Error("multi_head_self_attention: rank-2 input");
  const int d = xv.shape[1];
  if (heads < 1 || d % heads != 0) {
    throw Error("multi_head_self_attention: width " + std::to_string(d) +
                " not divisible into " + std::to_string(heads) + " heads");
  }
  const int dh = d / heads;
  Projected qkv = project_qkv(t, x, x, p);
  std::vector<Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    outs.push_back(scaled_dot_product_attention(
        t, head_slice(t, qkv.q, h, dh), head_slice(t, qkv.k, h, dh),
        head_slice(t, qkv.v, h, dh)));
  }
  Var cat = heads == 1 ? outs[0] : t.concat_columns(outs);
  return t.add_row_vector(t.matmul(cat, p.wo), p.bo);
}

Var xc_attention(Tape& t, Var x, const AttentionParams& p, Var tau_log,
                 int heads) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 2) throw Error("xc_attention: rank-2 input");
  const int d = xv.shape[1];
  if (heads < 1 || d % heads != 0) {
    throw Error("xc_attention: width " + std::to_string(d) +
                " not divisible into " + std::to_string(heads) + " heads");
  }
  const Tensor& tau = t.value(tau_log);
  if (tau.size() != heads) {
    throw Error("xc_attention: tau_log must hold one entry per head");
  }
  const int dh = d / heads;
  Projected qkv = project_qkv(t, x, x, p);
  Var tau_row = t.reshape(tau_log, Shape{1, heads});
  std::vector<Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qn = t.l2_normalize_columns(head_slice(t, qkv.q, h, dh));
    Var kn = t.l2_normalize_columns(head_slice(t, qkv.k, h, dh));
    // (d/h, d/h) feature-by-feature scores, tempered by 1/tau per head.
    Var scores = t.matmul(qn, kn, /*trans_a=*/true, /*trans_b=*/false);
    Var inv_tau = t.exp(t.scale(t.slice_columns(tau_row, h, h + 1), -1.0));
    Var att = t.softmax_rows(t.scale_by(scores, inv_tau));
    // Output feature i mixes value features j with weights att(i, j).
    outs.push_back(t.matmul(head_slice(t, qkv.v, h, dh), att,
                            /*trans_a=*/false, /*trans_b=*/true));
  }
  Var cat = heads == 1 ? outs[0] : t.concat_columns(outs);
  return t.add_row_vector(t.matmul(cat, p.wo), p.bo);
}

Var class_attention(Tape& t, Var z, const AttentionParams& p, int heads) {
  const Tensor& zv = t.value(z);
  if (zv.rank() != 2 || zv.shape[0] < 1) {
    throw Error("class_attention: rank-2 input with a class-token row");
  }
  const int d = zv.shape[1];
  if (heads < 1 || d % heads != 0) {
    throw Error("class_attention: width " + std::to_string(d) +
                " not divisible into " + std::to_string(heads) + " heads");
  }
  const int dh = d / heads;
  Var cls = t.slice_rows(z, 0, 1);
  Projected qkv = project_qkv(t, cls, z, p);
  std::vector<Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    outs.push_back(scaled_dot_product_attention(
        t, head_slice(t, qkv.q, h, dh), head_slice(t, qkv.k, h, dh),
        head_slice(t, qkv.v, h, dh)));
  }
  Var cat = heads == 1 ? outs[0] : t.concat_columns(outs);
  return t.add_row_vector(t.matmul(cat, p.wo), p.bo);
}

namespace {

Var local_patch_interaction(Tape& t, Var x, const BlockVars& b, int grid_h,
                            int grid_w) {
  const Tensor& xv = t.value(x);
  const int n = xv.shape[0];
  const int d = xv.shape[1];
  if (grid_h * grid_w != n) {
    throw Error("local patch interaction: token grid " +
                std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                " does not cover " + std::to_string(n) + " tokens");
  }
  Var grid = t.reshape(x, Shape{grid_h, grid_w, d});
  Var c1 = t.depthwise_conv2d(grid, *b.lpi_dw1_w, *b.lpi_dw1_b, 1);
  // Per-channel normalization over the token grid, then affine.
  Var flat = t.reshape(c1, Shape{n, d});
  Var normed = t.transpose(t.standardize_rows(t.transpose(flat)));
  Var affine = t.add_row_vector(t.scale_columns(normed, *b.lpi_norm_g),
                                *b.lpi_norm_b);
  Var act = t.gelu(affine);
  Var c2 = t.depthwise_conv2d(t.reshape(act, Shape{grid_h, grid_w, d}),
                              *b.lpi_dw2_w, *b.lpi_dw2_b, 1);
  return t.reshape(c2, Shape{n, d});
}

Var maybe_layerscale(Tape& t, Var x, const std::optional<Var>& gains) {
  return gains.has_value() ? t.scale_columns(x, *gains) : x;
}

}  // namespace

Var transformer_block(Tape& t, Var x, const BlockVars& b,
                      const ModelConfig& config, int grid_h, int grid_w) {
  Var normed = layer_norm(t, x, b.ln1_g, b.ln1_b);
  Var attn_out;
  if (config.block_kind == BlockKind::CrossCovariance) {
    attn_out = xc_attention(t, normed, b.attn, *b.tau_log, config.heads);
  } else {
    attn_out = multi_head_self_attention(t, normed, b.attn, config.heads);
  }
  x = t.add(x, maybe_layerscale(t, attn_out, b.ls_attn));

  if (config.block_kind == BlockKind::CrossCovariance) {
    Var lpi_in = layer_norm(t, x, *b.lpi_ln_g, *b.lpi_ln_b);
    Var lpi_out = local_patch_interaction(t, lpi_in, b, grid_h, grid_w);
    x = t.add(x, maybe_layerscale(t, lpi_out, b.ls_lpi));
  }

  Var mlp_out = mlp(t, layer_norm(t, x, b.ln2_g, b.ln2_b), b);
  return t.add(x, maybe_layerscale(t, mlp_out, b.ls_mlp));
}

Var class_attention_block(Tape& t, Var cls, Var patches, const BlockVars& b,
                          int heads) {
  Var z = t.concat_rows({cls, patches});
  Var ca = class_attention(t, layer_norm(t, z, b.ln1_g, b.ln1_b), b.attn,
                           heads);
  cls = t.add(cls, maybe_layerscale(t, ca, b.ls_attn));
  Var m = mlp(t, layer_norm(t, cls, b.ln2_g, b.ln2_b), b);
  return t.add(cls, maybe_layerscale(t, m, b.ls_mlp));
}

Var patch_embed(Tape& t, Var image, const ModelConfig& config,
                const VarMap& vars) {
  const Tensor& img = t.value(image);
  if (img.rank() != 3 || img.shape[0] != config.image_h ||
      img.shape[1] != config.image_w || img.shape[2] != config.image_c) {
    throw Error("patch_embed: image shape " + shape_str(img.shape) +
                " does not match config " + std::to_string(config.image_h) +
                "x" + std::to_string(config.image_w) + "x" +
                std::to_string(config.image_c));
  }
  if (config.patch_embed == PatchEmbedKind::Linear) {
    Var patches = t.patchify(image, config.patch_size);
    return t.add_row_vector(t.matmul(patches, get_var(vars, "patch.lin.w")),
                            get_var(vars, "patch.lin.b"));
  }
  Var x = image;
  const int k = static_cast<int>(config.conv_strides.size());
  for (int i = 0; i < k; ++i) {
    const std::string base = "patch.conv" + std::to_string(i) + ".";
    x = t.conv2d(x, get_var(vars, base + "w"), get_var(vars, base + "b"),
                 config.conv_strides[static_cast<size_t>(i)], 1);
    if (i + 1 < k) x = t.gelu(x);
  }
  return t.reshape(x, Shape{config.token_count(), config.d_model});
}

Var positional_encoding(Tape& t, const ModelConfig& config, const VarMap& vars,
                        int tokens) {
  if (config.pos_encoding == PosEncodingKind::Learned) {
    Var pos = get_var(vars, "pos");
    if (t.value(pos).shape[0] != tokens) {
      throw Error("positional_encoding: learned table covers " +
                  std::to_string(t.value(pos).shape[0]) + " tokens, need " +
                  std::to_string(tokens));
    }
    return pos;
  }
  return t.leaf(sinusoidal_table(tokens, config.d_model), false, "pos_sin");
}

Var forward_model(Tape& t, const ModelConfig& config, const VarMap& vars,
                  Var image) {
  config.validate();
  const int gh = config.grid_h();
  const int gw = config.grid_w();
  Var tokens = patch_embed(t, image, config, vars);
  Var x = t.add(tokens, positional_encoding(t, config, vars, gh * gw));
  Var cls_out;
  if (config.block_kind == BlockKind::SelfAttention) {
    x = t.concat_rows({get_var(vars, "cls"), x});
    for (int i = 0; i < config.depth; ++i) {
      BlockVars b =
          block_vars(vars, "blocks." + std::to_string(i) + ".", config, false);
      x = transformer_block(t, x, b, config, gh, gw);
    }
    cls_out = t.slice_rows(x, 0, 1);
  } else {
    for (int i = 0; i < config.depth; ++i) {
      BlockVars b =
          block_vars(vars, "blocks." + std::to_string(i) + ".", config, false);
      x = transformer_block(t, x, b, config, gh, gw);
    }
    Var cls = get_var(vars, "cls");
    for (int j = 0; j < config.class_attention_depth; ++j) {
      BlockVars b = block_vars(
          vars, "cablocks." + std::to_string(j) + ".", config, true);
      cls = class_attention_block(t, cls, x, b, config.heads);
    }
    cls_out = cls;
  }
  Var final_norm =
      layer_norm(t, cls_out, get_var(vars, "norm.g"), get_var(vars, "norm.b"));
  return t.add_row_vector(t.matmul(final_norm, get_var(vars, "head.w")),
                          get_var(vars, "head.b"));
}

std::vector<double> forward_logits(const ModelConfig& config,
                                   const Params& params, const Tensor& image) {
  Tape t;
  VarMap vars = bind_params(t, params, false);
  Var logits = forward_model(t, config, vars, t.leaf(image, false, "image"));
  return t.value(logits).data;
}

int predict_class(const ModelConfig& config, const Params& params,
                  const Tensor& image) {
  const std::vector<double> logits = forward_logits(config, params, image);
  int best = 0;
  for (size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[static_cast<size_t>(best)]) {
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace advit
