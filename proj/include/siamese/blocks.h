#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "siamese/config.h"
#include "siamese/param_set.h"
#include "siamese/tape.h"

namespace siamese {

enum class BlockKind { kAttention, kMlp };

// Sub-layer i is attention when even and MLP when odd; both belong to
// transformer layer i / 2.
inline BlockKind sublayer_kind(std::size_t i) {
  return i % 2 == 0 ? BlockKind::kAttention : BlockKind::kMlp;
}
inline bool is_attention(std::size_t i) { return i % 2 == 0; }

// "layer.<i/2>.attn" or "layer.<i/2>.mlp".
std::string sublayer_prefix(std::size_t i);

// DeepNet decoder constants: residual multiplier and init gain.
double deepnorm_alpha(std::size_t n_layers);
double deepnorm_beta(std::size_t n_layers);

/// Fresh parameters for `config`.
///
/// Weight matrices are drawn from a normal with std 1/sqrt(d_model),
/// truncated at three standard deviations, in a topology-independent order so
/// that the same seed yields identical block weights for every topology. Norm
/// scales and gamma start at 1.0. DeepNorm multiplies the value, output and
/// MLP projections by its beta gain.
ParamSet init_params(const ModelConfig& config);

// Weights of one residual transformation, bound to a tape.
struct BlockParams {
  BlockKind kind = BlockKind::kAttention;
  Var w_q, w_k, w_v, w_o;
  std::optional<Var> q_norm, k_norm;
  Var w_gate, w_up, w_down;
};

// Binds parameters as differentiable inputs (gradients flow into `params`).
BlockParams bind_block(Tape& tape, ParamSet& params, const ModelConfig& config,
                       std::size_t sublayer);
// Binds parameters as constants.
BlockParams bind_block(Tape& tape, const ParamSet& params, const ModelConfig& config,
                       std::size_t sublayer);

// Causal multi-head attention on x [B, T, d]. With qk_norm the queries and
// keys are RMS-normalised per head before the dot product.
Var attention_forward(const BlockParams& p, Var x, const ModelConfig& config);
Var mlp_forward(const BlockParams& p, Var x);
Var block_forward(const BlockParams& p, Var x, const ModelConfig& config);

// Token plus learned absolute position embedding, optionally followed by a
// parameter-free RMSNorm.
Var embed(const TokenGrid& tokens, Var table, Var pos_table, bool embed_norm, double eps);

}  // namespace siamese
