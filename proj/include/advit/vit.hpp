#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "advit/tape.hpp"

namespace advit {

// Which residual-block family the trunk uses.
enum class BlockKind {
  SelfAttention,          // pre-norm multi-head self-attention + MLP
  ClassAttentionTwoStage,  // self-attention trunk, class-attention head stage
  CrossCovariance,        // cross-covariance attention + local patch
                          // interaction, class-attention head stage
};

enum class PatchEmbedKind { Linear, ConvStack };
enum class PosEncodingKind { Learned, Sinusoidal };

struct ModelConfig {
  BlockKind block_kind = BlockKind::SelfAttention;
  int depth = 2;
  int class_attention_depth = 2;  // used by the two-stage kinds
  int d_model = 32;
  int heads = 4;
  int num_classes = 2;
  int image_h = 8, image_w = 8, image_c = 3;
  PatchEmbedKind patch_embed = PatchEmbedKind::Linear;
  int patch_size = 2;                  // linear embedding
  std::vector<int> conv_strides;       // conv-stack embedding, one per layer
  PosEncodingKind pos_encoding = PosEncodingKind::Learned;
  std::optional<double> layerscale_init;  // required for the two-stage kinds
  double mlp_ratio = 4.0;

  void validate() const;  // throws Error on violations
  bool has_class_stage() const {
    return block_kind != BlockKind::SelfAttention;
  }
  int head_dim() const { return d_model / heads; }
  int mlp_hidden() const;
  // Token-grid extents after the patch embedding.
  int grid_h() const;
  int grid_w() const;
  int token_count() const { return grid_h() * grid_w(); }
};

// Published LayerScale initial values by trunk family and depth.
double default_layerscale_init(BlockKind kind, int depth);

// Ordered name -> tensor parameter store; map order fixes the iteration,
// serialization, and optimizer update order.
using Params = std::map<std::string, Tensor>;
using VarMap = std::map<std::string, Var>;

Params init_params(const ModelConfig& config, std::uint64_t seed);
VarMap bind_params(Tape& tape, const Params& params, bool requires_grad);

// Sinusoidal position table; rows are token positions, values in [-1, 1],
// position 0 encodes to (0, 1, 0, 1, ...).
Tensor sinusoidal_table(int tokens, int dim);

// Attention projection weights; every matrix is (d, d), biases (d).
struct AttentionParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

// One residual block's parameters, assembled from a VarMap by block_vars().
struct BlockVars {
  AttentionParams attn;
  Var ln1_g, ln1_b, ln2_g, ln2_b;
  Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  std::optional<Var> ls_attn, ls_mlp;  // LayerScale gains, per channel
  // Cross-covariance extras.
  std::optional<Var> tau_log;  // per-head log temperature
  std::optional<Var> lpi_ln_g, lpi_ln_b;
  std::optional<Var> lpi_dw1_w, lpi_dw1_b, lpi_norm_g, lpi_norm_b;
  std::optional<Var> lpi_dw2_w, lpi_dw2_b, ls_lpi;
};

BlockVars block_vars(const VarMap& vars, const std::string& prefix,
                     const ModelConfig& config, bool class_stage);

// Core attention ops. Token matrices are (tokens, d_model).
Var scaled_dot_product_attention(Tape& t, Var q, Var k, Var v);
Var multi_head_self_attention(Tape& t, Var x, const AttentionParams& p,
                              int heads);
// Cross-covariance attention; feature columns of Q and K are unit-normalized
// over tokens and the (d/h, d/h) score matrix is tempered per head.
Var xc_attention(Tape& t, Var x, const AttentionParams& p, Var tau_log,
                 int heads);
// Class attention: queries from the class token (row 0 of z), keys/values
// from all of z. Returns the refreshed class token row; patch rows are not
// touched by this op.
Var class_attention(Tape& t, Var z, const AttentionParams& p, int heads);

// Full residual block on the patch-token matrix.
Var transformer_block(Tape& t, Var x, const BlockVars& b,
                      const ModelConfig& config, int grid_h, int grid_w);
// Class-attention block: refreshes the class token against [cls; patches];
// the patch rows pass through bit-exactly.
Var class_attention_block(Tape& t, Var cls, Var patches, const BlockVars& b,
                          int heads);

// Patch embedding (either kind) for one image leaf; output (N, d_model).
Var patch_embed(Tape& t, Var image, const ModelConfig& config,
                const VarMap& vars);
// Position table as a Var: the learned parameter or a sinusoidal constant.
Var positional_encoding(Tape& t, const ModelConfig& config, const VarMap& vars,
                        int tokens);

// Image (H, W, C) -> logits (1, num_classes).
Var forward_model(Tape& t, const ModelConfig& config, const VarMap& vars,
                  Var image);

// Plain inference without building gradients.
std::vector<double> forward_logits(const ModelConfig& config,
                                   const Params& params, const Tensor& image);
int predict_class(const ModelConfig& config, const Params& params,
                  const Tensor& image);

}  // namespace advit
