#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "siamese/blocks.h"
#include "siamese/config.h"
#include "siamese/param_set.h"
#include "siamese/tape.h"

namespace siamese {

// Hidden values entering sub-layer `layer_index`. X is the bounded stream (or
// the only stream), Y the unbounded one, O the residual update produced by
// this sub-layer. The trace ends with an entry for the final state X_N/Y_N
// that carries no update.
struct StreamState {
  std::size_t layer_index = 0;
  Tensor x;
  std::optional<Tensor> y;
  std::optional<Tensor> o;
  double residual_scale = 1.0;
};

struct StreamVars {
  Var x;
  std::optional<Var> y;
};

// Normalisation parameters attached to one sub-layer. Which members are set
// depends on the topology.
struct SublayerNorms {
  std::optional<Var> ln;       // Pre/Post/DeepNorm/ResiDual
  std::optional<Var> ln_in;    // HybridNorm block input
  std::optional<Var> ln_post;  // HybridNorm main path after attention
  std::optional<Var> ln_x;     // Siamese bounded stream
  std::optional<Var> ln_y;     // Siamese unbounded stream at block input
  std::optional<Var> ln_fuse;  // Siamese fused input
  std::optional<Var> gamma;    // SiamesePractical attention mixing vector
};

struct BoundModel {
  Var tok;
  Var pos;
  std::optional<Var> embed_ln;
  std::vector<BlockParams> blocks;
  std::vector<SublayerNorms> norms;
  std::optional<Var> final_norm;
  Var unembed;
};

BoundModel bind_model(Tape& tape, ParamSet& params, const ModelConfig& config);
BoundModel bind_model(Tape& tape, const ParamSet& params, const ModelConfig& config);
SublayerNorms bind_norms(Tape& tape, const ParamSet& params, const ModelConfig& config,
                         std::size_t sublayer);

// 1/sqrt(i+1) with depth scaling on a Siamese topology, 1 otherwise.
double residual_scale(const ModelConfig& config, std::size_t sublayer);

struct LayerStep {
  StreamVars next;
  Var update;
  double residual_scale = 1.0;
  bool diverged = false;
};

/// One residual sub-layer of the configured topology.
///
/// Sub-layer indices run over attention and MLP blocks separately, so a model
/// with n_layers transformer layers has 2 * n_layers of them.
LayerStep layer_forward(const ModelConfig& config, const StreamVars& state,
                        const BlockParams& block, const SublayerNorms& norms,
                        std::size_t sublayer);

struct Divergence {
  std::size_t sublayer = 0;
  std::string stage;
};

struct ForwardPass {
  // Entry i holds X_i, Y_i; the last entry is the final state. On divergence
  // the list stops at the failing sub-layer's output.
  std::vector<StreamVars> states;
  std::vector<Var> updates;
  std::vector<double> residual_scales;
  std::optional<Var> hidden;  // representation fed to the unembedding
  std::optional<Var> logits;
  std::optional<Divergence> divergence;

  std::vector<StreamState> trace() const;
};

ForwardPass model_forward(const ModelConfig& config, const BoundModel& model,
                          const TokenGrid& tokens);

struct ForwardResult {
  Tensor logits;
  std::vector<StreamState> trace;
  std::optional<Divergence> divergence;
};

// Value-only forward on its own tape.
ForwardResult model_forward(const ModelConfig& config, const ParamSet& params,
                            const TokenGrid& tokens);

enum class ReductionTarget { kToPreNorm, kToPostNorm };

/// Zeroes the scales that collapse a SiameseCanonical model onto a single
/// stream: every X-side scale for kToPreNorm, every Y-side scale and the final
/// norm for kToPostNorm. Requires fused_input_norm and depth_scaling off.
ParamSet apply_reduction(const ModelConfig& config, const ParamSet& params,
                         ReductionTarget target);

}  // namespace siamese
