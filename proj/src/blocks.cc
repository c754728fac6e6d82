#include "siamese/blocks.h"

#include <cmath>
#include <random>
#include <type_traits>

#include "siamese/errors.h"

namespace siamese {
namespace {

Tensor truncated_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.data()) {
    double z = normal(rng);
    while (std::abs(z) > 3.0) z = normal(rng);
    v = z * stddev;
  }
  return t;
}

Tensor ones(std::size_t n) { return Tensor(Shape{n}, 1.0); }

void add_norms(ParamSet& params, const ModelConfig& c, std::size_t i) {
  const std::string p = sublayer_prefix(i);
  const std::size_t d = c.d_model;
  switch (c.topology) {
    case TopologyKind::kPreNorm:
    case TopologyKind::kPostNorm:
    case TopologyKind::kDeepNorm:
    case TopologyKind::kResiDual:
      params.add(p + ".ln.scale", ones(d));
      break;
    case TopologyKind::kHybridNorm:
      params.add(p + ".ln_in.scale", ones(d));
      if (is_attention(i)) params.add(p + ".ln_post.scale", ones(d));
      break;
    case TopologyKind::kSiameseCanonical:
      params.add(p + ".ln_x.scale", ones(d));
      params.add(p + ".ln_y.scale", ones(d));
      if (c.fused_input_norm) params.add(p + ".ln_fuse.scale", ones(d));
      break;
    case TopologyKind::kSiamesePractical:
      if (is_attention(i)) {
        params.add(p + ".ln_x.scale", ones(d));
        params.add(p + ".gamma", ones(d));
      }
      params.add(p + ".ln_y.scale", ones(d));
      if (c.fused_input_norm) params.add(p + ".ln_fuse.scale", ones(d));
      break;
  }
}

template <typename Params>
Var bind_named(Tape& tape, Params& params, const std::string& name) {
  if constexpr (std::is_const_v<Params>) {
    return tape.constant(params.at(name).value);
  } else {
    return tape.param(params.at(name));
  }
}

template <typename Params>
BlockParams bind_block_impl(Tape& tape, Params& params, const ModelConfig& c,
                            std::size_t i) {
  const std::string p = sublayer_prefix(i);
  BlockParams b;
  b.kind = sublayer_kind(i);
  if (b.kind == BlockKind::kAttention) {
    b.w_q = bind_named(tape, params, p + ".w_q");
    b.w_k = bind_named(tape, params, p + ".w_k");
    b.w_v = bind_named(tape, params, p + ".w_v");
    b.w_o = bind_named(tape, params, p + ".w_o");
    if (c.qk_norm) {
      b.q_norm = bind_named(tape, params, p + ".q_norm.scale");
      b.k_norm = bind_named(tape, params, p + ".k_norm.scale");
    }
  } else {
    b.w_gate = bind_named(tape, params, p + ".w_gate");
    b.w_up = bind_named(tape, params, p + ".w_up");
    b.w_down = bind_named(tape, params, p + ".w_down");
  }
  return b;
}

Var per_head_norm(Var x, Var scale, std::size_t n_heads, double eps) {
  const Shape shape = x.shape();
  Var heads = reshape(x, Shape{shape[0], shape[1], n_heads, shape[2] / n_heads});
  return reshape(rms_norm(heads, scale, eps), shape);
}

}  // namespace

std::string sublayer_prefix(std::size_t i) {
  return "layer." + std::to_string(i / 2) + (is_attention(i) ? ".attn" : ".mlp");
}

double deepnorm_alpha(std::size_t n_layers) {
  return std::pow(2.0 * static_cast<double>(n_layers), 0.25);
}

double deepnorm_beta(std::size_t n_layers) {
  return std::pow(8.0 * static_cast<double>(n_layers), -0.25);
}

ParamSet init_params(const ModelConfig& c) {
  c.validate();
  std::mt19937_64 rng(c.seed);
  const std::size_t d = c.d_model;
  const std::size_t h = c.ffn_hidden();
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  const double beta =
      c.topology == TopologyKind::kDeepNorm ? deepnorm_beta(c.n_layers) : 1.0;
  auto weight = [&](Shape shape, double gain = 1.0) {
    Tensor t = truncated_normal(std::move(shape), stddev, rng);
    if (gain != 1.0) {
      for (double& v : t.data()) v *= gain;
    }
    return t;
  };

  ParamSet params;
  params.add("embed.tok", weight({c.vocab_size, d}));
  params.add("embed.pos", weight({c.seq_len, d}));
  switch (c.topology) {
    case TopologyKind::kPostNorm:
    case TopologyKind::kDeepNorm:
      params.add("embed.ln.scale", ones(d));
      break;
    case TopologyKind::kSiameseCanonical:
    case TopologyKind::kSiamesePractical:
      params.add("embed.ln_x.scale", ones(d));
      break;
    default:
      break;
  }

  for (std::size_t i = 0; i < c.n_sublayers(); ++i) {
    const std::string p = sublayer_prefix(i);
    if (is_attention(i)) {
      params.add(p + ".w_q", weight({d, d}));
      params.add(p + ".w_k", weight({d, d}));
      params.add(p + ".w_v", weight({d, d}, beta));
      params.add(p + ".w_o", weight({d, d}, beta));
      if (c.qk_norm) {
        params.add(p + ".q_norm.scale", ones(c.head_dim()));
        params.add(p + ".k_norm.scale", ones(c.head_dim()));
      }
    } else {
      params.add(p + ".w_gate", weight({d, h}, beta));
      params.add(p + ".w_up", weight({d, h}, beta));
      params.add(p + ".w_down", weight({h, d}, beta));
    }
    add_norms(params, c, i);
  }

  switch (c.topology) {
    case TopologyKind::kPreNorm:
    case TopologyKind::kResiDual:
    case TopologyKind::kSiameseCanonical:
    case TopologyKind::kSiamesePractical:
      params.add("final_norm.scale", ones(d));
      break;
    default:
      break;
  }
  params.add("unembed", weight({d, c.vocab_size}));
  return params;
}

BlockParams bind_block(Tape& tape, ParamSet& params, const ModelConfig& c,
                       std::size_t sublayer) {
  return bind_block_impl(tape, params, c, sublayer);
}

BlockParams bind_block(Tape& tape, const ParamSet& params, const ModelConfig& c,
                       std::size_t sublayer) {
  return bind_block_impl(tape, params, c, sublayer);
}

Var attention_forward(const BlockParams& p, Var x, const ModelConfig& c) {
  if (p.kind != BlockKind::kAttention) throw ContractError("not an attention block");
  if (x.value().rank() != 3) {
    throw DimensionError("attention input must be [B, T, d], got " + shape_string(x.shape()));
  }
  if (x.shape()[1] > c.seq_len) {
    throw DimensionError("sequence length " + std::to_string(x.shape()[1]) +
                         " exceeds seq_len " + std::to_string(c.seq_len));
  }
  Var q = matmul(x, p.w_q);
  Var k = matmul(x, p.w_k);
  Var v = matmul(x, p.w_v);
  if (p.q_norm) q = per_head_norm(q, *p.q_norm, c.n_heads, c.norm_eps);
  if (p.k_norm) k = per_head_norm(k, *p.k_norm, c.n_heads, c.norm_eps);
  return matmul(causal_attention(q, k, v, c.n_heads), p.w_o);
}

Var mlp_forward(const BlockParams& p, Var x) {
  if (p.kind != BlockKind::kMlp) throw ContractError("not an MLP block");
  return swiglu_mlp(x, p.w_gate, p.w_up, p.w_down);
}

Var block_forward(const BlockParams& p, Var x, const ModelConfig& c) {
  return p.kind == BlockKind::kAttention ? attention_forward(p, x, c) : mlp_forward(p, x);
}

Var embed(const TokenGrid& tokens, Var table, Var pos_table, bool embed_norm, double eps) {
  Var x = add(embedding(table, tokens), positional(pos_table, tokens.batch, tokens.time));
  if (embed_norm) x = rms_norm(x, std::nullopt, eps);
  return x;
}

}  // namespace siamese
