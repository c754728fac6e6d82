#include "siamese/topology.h"

#include <cmath>
#include <type_traits>

#include "siamese/errors.h"

namespace siamese {
namespace {

template <typename Params>
std::optional<Var> bind_optional(Tape& tape, Params& params, const std::string& name) {
  auto* p = params.find(name);
  if (p == nullptr) return std::nullopt;
  if constexpr (std::is_const_v<Params>) {
    return tape.constant(p->value);
  } else {
    return tape.param(*p);
  }
}

template <typename Params>
Var bind_required(Tape& tape, Params& params, const std::string& name) {
  auto v = bind_optional(tape, params, name);
  if (!v) throw ConfigError("parameter set lacks '" + name + "'");
  return *v;
}

template <typename Params>
SublayerNorms bind_norms_impl(Tape& tape, Params& params, std::size_t i) {
  const std::string p = sublayer_prefix(i);
  SublayerNorms n;
  n.ln = bind_optional(tape, params, p + ".ln.scale");
  n.ln_in = bind_optional(tape, params, p + ".ln_in.scale");
  n.ln_post = bind_optional(tape, params, p + ".ln_post.scale");
  n.ln_x = bind_optional(tape, params, p + ".ln_x.scale");
  n.ln_y = bind_optional(tape, params, p + ".ln_y.scale");
  n.ln_fuse = bind_optional(tape, params, p + ".ln_fuse.scale");
  n.gamma = bind_optional(tape, params, p + ".gamma");
  return n;
}

template <typename Params>
BoundModel bind_model_impl(Tape& tape, Params& params, const ModelConfig& c) {
  c.validate();
  BoundModel m;
  m.tok = bind_required(tape, params, "embed.tok");
  m.pos = bind_required(tape, params, "embed.pos");
  m.embed_ln = bind_optional(tape, params, "embed.ln.scale");
  if (!m.embed_ln) m.embed_ln = bind_optional(tape, params, "embed.ln_x.scale");
  for (std::size_t i = 0; i < c.n_sublayers(); ++i) {
    m.blocks.push_back(bind_block(tape, params, c, i));
    m.norms.push_back(bind_norms_impl(tape, params, i));
  }
  m.final_norm = bind_optional(tape, params, "final_norm.scale");
  m.unembed = bind_required(tape, params, "unembed");
  return m;
}

Var require(const std::optional<Var>& v, const char* what, std::size_t i) {
  if (!v) {
    throw ConfigError(std::string("sub-layer ") + std::to_string(i) + " lacks " + what);
  }
  return *v;
}

Var norm(Var x, const std::optional<Var>& scale, const char* what, std::size_t i,
         double eps) {
  return rms_norm(x, require(scale, what, i), eps);
}

Var scaled(Var x, double s) { return s == 1.0 ? x : scale(x, s); }

}  // namespace

BoundModel bind_model(Tape& tape, ParamSet& params, const ModelConfig& config) {
  return bind_model_impl(tape, params, config);
}

BoundModel bind_model(Tape& tape, const ParamSet& params, const ModelConfig& config) {
  return bind_model_impl(tape, params, config);
}

SublayerNorms bind_norms(Tape& tape, const ParamSet& params, const ModelConfig&,
                         std::size_t sublayer) {
  return bind_norms_impl(tape, params, sublayer);
}

double residual_scale(const ModelConfig& config, std::size_t sublayer) {
  if (!config.depth_scaling || !is_siamese(config.topology)) return 1.0;
  return 1.0 / std::sqrt(static_cast<double>(sublayer + 1));
}

LayerStep layer_forward(const ModelConfig& c, const StreamVars& state,
                        const BlockParams& block, const SublayerNorms& norms,
                        std::size_t i) {
  if (i >= c.n_sublayers()) {
    throw ContractError("sub-layer index " + std::to_string(i) + " out of range");
  }
  const double eps = c.norm_eps;
  const Var x = state.x;
  LayerStep step;
  switch (c.topology) {
    case TopologyKind::kPreNorm: {
      step.update = block_forward(block, norm(x, norms.ln, "ln", i, eps), c);
      step.next.x = add(x, step.update);
      break;
    }
    case TopologyKind::kPostNorm: {
      step.update = block_forward(block, x, c);
      step.next.x = norm(add(x, step.update), norms.ln, "ln", i, eps);
      break;
    }
    case TopologyKind::kDeepNorm: {
      step.update = block_forward(block, x, c);
      const Var main = scale(x, deepnorm_alpha(c.n_layers));
      step.next.x = norm(add(main, step.update), norms.ln, "ln", i, eps);
      break;
    }
    case TopologyKind::kResiDual: {
      if (!state.y) throw ContractError("ResiDual state lacks the Y stream");
      step.update = block_forward(block, x, c);
      step.next.x = norm(add(x, step.update), norms.ln, "ln", i, eps);
      step.next.y = add(*state.y, step.update);
      break;
    }
    case TopologyKind::kHybridNorm: {
      step.update = block_forward(block, norm(x, norms.ln_in, "ln_in", i, eps), c);
      const Var sum = add(x, step.update);
      step.next.x = is_attention(i) ? norm(sum, norms.ln_post, "ln_post", i, eps) : sum;
      break;
    }
    case TopologyKind::kSiameseCanonical:
    case TopologyKind::kSiamesePractical: {
      if (!state.y) throw ContractError("Siamese state lacks the Y stream");
      const bool practical = c.topology == TopologyKind::kSiamesePractical;
      const Var y_normed = norm(*state.y, norms.ln_y, "ln_y", i, eps);
      const Var x_in = practical && is_attention(i)
                           ? mul_lastdim(x, require(norms.gamma, "gamma", i))
                           : x;
      Var fused = add(x_in, y_normed);
      if (c.fused_input_norm) fused = norm(fused, norms.ln_fuse, "ln_fuse", i, eps);
      step.update = block_forward(block, fused, c);
      step.residual_scale = residual_scale(c, i);
      const Var sum = add(x, scaled(step.update, step.residual_scale));
      const bool main_norm = !practical || is_attention(i);
      step.next.x = main_norm ? norm(sum, norms.ln_x, "ln_x", i, eps) : sum;
      step.next.y = add(*state.y, step.update);
      break;
    }
  }
  step.diverged = !step.update.value().all_finite() || !step.next.x.value().all_finite() ||
                  (step.next.y && !step.next.y->value().all_finite());
  return step;
}

std::vector<StreamState> ForwardPass::trace() const {
  std::vector<StreamState> out;
  out.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    StreamState s;
    s.layer_index = i;
    s.x = states[i].x.value();
    if (states[i].y) s.y = states[i].y->value();
    if (i < updates.size()) {
      s.o = updates[i].value();
      s.residual_scale = residual_scales[i];
    }
    out.push_back(std::move(s));
  }
  return out;
}

ForwardPass model_forward(const ModelConfig& c, const BoundModel& m,
                          const TokenGrid& tokens) {
  ForwardPass pass;
  const Var input = embed(tokens, m.tok, m.pos, c.embed_norm, c.norm_eps);

  StreamVars state;
  switch (c.topology) {
    case TopologyKind::kPostNorm:
    case TopologyKind::kDeepNorm:
    case TopologyKind::kSiameseCanonical:
    case TopologyKind::kSiamesePractical:
      state.x = rms_norm(input, require(m.embed_ln, "embedding norm", 0), c.norm_eps);
      break;
    default:
      state.x = input;
      break;
  }
  // Own node, so the Y_0 adjoint is the Y-stream path alone.
  if (is_two_stream(c.topology)) state.y = scale(input, 1.0);
  pass.states.push_back(state);
  if (!input.value().all_finite() || !state.x.value().all_finite()) {
    pass.divergence = Divergence{0, "embedding"};
    return pass;
  }

  for (std::size_t i = 0; i < c.n_sublayers(); ++i) {
    LayerStep step = layer_forward(c, state, m.blocks[i], m.norms[i], i);
    pass.updates.push_back(step.update);
    pass.residual_scales.push_back(step.residual_scale);
    pass.states.push_back(step.next);
    state = step.next;
    if (step.diverged) {
      pass.divergence = Divergence{i, "sub-layer"};
      return pass;
    }
  }

  Var hidden = state.x;
  switch (c.topology) {
    case TopologyKind::kPreNorm:
      hidden = rms_norm(state.x, require(m.final_norm, "final norm", c.n_sublayers()),
                        c.norm_eps);
      break;
    case TopologyKind::kResiDual:
    case TopologyKind::kSiameseCanonical:
    case TopologyKind::kSiamesePractical:
      hidden = add(state.x, rms_norm(*state.y,
                                     require(m.final_norm, "final norm", c.n_sublayers()),
                                     c.norm_eps));
      break;
    default:
      break;
  }
  pass.hidden = hidden;
  pass.logits = matmul(hidden, m.unembed);
  if (!pass.logits->value().all_finite()) {
    pass.divergence = Divergence{c.n_sublayers(), "logits"};
  }
  return pass;
}

ForwardResult model_forward(const ModelConfig& config, const ParamSet& params,
                            const TokenGrid& tokens) {
  Tape tape;
  const BoundModel model = bind_model(tape, params, config);
  ForwardPass pass = model_forward(config, model, tokens);
  ForwardResult result;
  if (pass.logits) result.logits = pass.logits->value();
  result.trace = pass.trace();
  result.divergence = pass.divergence;
  return result;
}

ParamSet apply_reduction(const ModelConfig& config, const ParamSet& params,
                         ReductionTarget target) {
  if (config.topology != TopologyKind::kSiameseCanonical) {
    throw ContractError("reductions apply to SiameseCanonical parameters only");
  }
  if (config.fused_input_norm || config.depth_scaling) {
    throw ContractError("reductions require fused_input_norm and depth_scaling off");
  }
  ParamSet reduced = params;
  auto ends_with = [](const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (auto& p : reduced) {
    const bool zero = target == ReductionTarget::kToPreNorm
                          ? ends_with(p.name, "ln_x.scale")
                          : ends_with(p.name, "ln_y.scale") || p.name == "final_norm.scale";
    if (zero) p.value.fill(0.0);
  }
  return reduced;
}

}  // namespace siamese
