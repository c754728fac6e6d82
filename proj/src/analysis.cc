#include "siamese/analysis.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "siamese/errors.h"

namespace siamese {
namespace {

using TapeFn = std::function<Var(Tape&, Var)>;

Tensor evaluate(const TapeFn& f, const Tensor& at) {
  Tape tape;
  return f(tape, tape.constant(at)).value();
}

// Exact Jacobian of f at `at`, one reverse sweep per output coordinate.
Matrix reverse_jacobian(const TapeFn& f, const Tensor& at) {
  Tape tape;
  const Var in = tape.leaf(at);
  const Var out = f(tape, in);
  const std::size_t n_out = out.value().numel();
  Matrix jac(static_cast<Eigen::Index>(n_out), static_cast<Eigen::Index>(at.numel()));
  Tensor adjoint(out.shape());
  for (std::size_t r = 0; r < n_out; ++r) {
    adjoint.fill(0.0);
    adjoint[r] = 1.0;
    tape.backward_from(out, adjoint);
    const Tensor& g = in.grad();
    for (std::size_t c = 0; c < g.numel(); ++c) {
      jac(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = g[c];
    }
  }
  return jac;
}

Tensor axpy(double a, const Tensor& x, const Tensor& y) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * x[i] + y[i];
  return out;
}

// x + s * o, evaluated in the same order as layer_forward.
Tensor add_scaled(const Tensor& x, double s, const Tensor& o) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + (s == 1.0 ? o[i] : o[i] * s);
  return out;
}

void require_single_token(const StreamState& state, bool two_stream) {
  const auto ok = [](const Tensor& t) {
    return t.rank() == 3 && t.dim(0) == 1 && t.dim(1) == 1;
  };
  if (!ok(state.x) || (two_stream && (!state.y || !ok(*state.y)))) {
    throw ContractError("Jacobian analysis needs a single-token [1, 1, d] state");
  }
}

std::vector<double> flat(const Tensor& a, const std::optional<Tensor>& b) {
  std::vector<double> out(a.data().begin(), a.data().end());
  if (b) out.insert(out.end(), b->data().begin(), b->data().end());
  return out;
}

double mean_abs(const Tensor& t) {
  double total = 0.0;
  for (double v : t.data()) total += std::abs(v);
  return t.numel() == 0 ? 0.0 : total / static_cast<double>(t.numel());
}

}  // namespace

Matrix BlockJacobian::assembled() const {
  if (!two_stream) return dxx;
  const Eigen::Index d = dxx.rows();
  Matrix out(2 * d, 2 * d);
  out << dxx, dxy, dyx, dyy;
  return out;
}

BlockJacobian block_jacobian_assembled(const ModelConfig& c, const ParamSet& params,
                                       const StreamState& state, std::size_t i) {
  c.validate();
  if (i >= c.n_sublayers()) throw ContractError("sub-layer index out of range");
  const bool two = is_two_stream(c.topology);
  require_single_token(state, two);

  const std::string p = sublayer_prefix(i);
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const Matrix eye = Matrix::Identity(d, d);
  const double eps = c.norm_eps;

  auto norm_fn = [&](const std::string& name) -> TapeFn {
    return [&params, name, eps](Tape& tape, Var u) {
      return rms_norm(u, tape.constant(params.at(name).value), eps);
    };
  };
  const TapeFn block = [&params, &c, i, p, eps](Tape& tape, Var u) {
    const BlockParams b = bind_block(tape, params, c, i);
    if (c.fused_input_norm && is_siamese(c.topology)) {
      u = rms_norm(u, tape.constant(params.at(p + ".ln_fuse.scale").value), eps);
    }
    return block_forward(b, u, c);
  };

  BlockJacobian jac;
  jac.layer_index = i;
  jac.two_stream = two;
  const Tensor& x = state.x;

  switch (c.topology) {
    case TopologyKind::kPreNorm: {
      const TapeFn ln = norm_fn(p + ".ln.scale");
      const Matrix j_ln = reverse_jacobian(ln, x);
      const Matrix j_f = reverse_jacobian(block, evaluate(ln, x));
      jac.dxx = eye + j_f * j_ln;
      break;
    }
    case TopologyKind::kPostNorm:
    case TopologyKind::kDeepNorm:
    case TopologyKind::kResiDual: {
      const double alpha =
          c.topology == TopologyKind::kDeepNorm ? deepnorm_alpha(c.n_layers) : 1.0;
      const TapeFn ln = norm_fn(p + ".ln.scale");
      const Matrix j_f = reverse_jacobian(block, x);
      const Tensor fx = evaluate(block, x);
      const Tensor sum = axpy(alpha, x, fx);
      const Matrix j_ln = reverse_jacobian(ln, sum);
      jac.dxx = j_ln * (alpha * eye + j_f);
      if (two) {
        jac.dxy = Matrix::Zero(d, d);
        jac.dyx = j_f;
        jac.dyy = eye;
      }
      break;
    }
    case TopologyKind::kHybridNorm: {
      const TapeFn ln_in = norm_fn(p + ".ln_in.scale");
      const Matrix j_in = reverse_jacobian(ln_in, x);
      const Tensor xin = evaluate(ln_in, x);
      const Matrix j_f = reverse_jacobian(block, xin);
      if (is_attention(i)) {
        const Tensor sum = axpy(1.0, x, evaluate(block, xin));
        const Matrix j_post = reverse_jacobian(norm_fn(p + ".ln_post.scale"), sum);
        jac.dxx = j_post * (eye + j_f * j_in);
      } else {
        jac.dxx = eye + j_f * j_in;
      }
      break;
    }
    case TopologyKind::kSiameseCanonical:
    case TopologyKind::kSiamesePractical: {
      const bool practical = c.topology == TopologyKind::kSiamesePractical;
      const bool mixed = practical && is_attention(i);
      const Tensor& y = *state.y;
      const TapeFn ln_y = norm_fn(p + ".ln_y.scale");
      const Matrix j_y = reverse_jacobian(ln_y, y);
      const Tensor y_normed = evaluate(ln_y, y);

      Matrix g = eye;
      Tensor x_in = x;
      if (mixed) {
        const Tensor& gamma = params.at(p + ".gamma").value;
        for (Eigen::Index k = 0; k < d; ++k) g(k, k) = gamma[static_cast<std::size_t>(k)];
        for (std::size_t k = 0; k < x_in.numel(); ++k) x_in[k] = x[k] * gamma[k];
      }
      const Tensor fused = axpy(1.0, x_in, y_normed);
      const Matrix j_f = reverse_jacobian(block, fused);
      const Tensor o = evaluate(block, fused);
      const double s = residual_scale(c, i);
      const bool main_norm = !practical || is_attention(i);
      const Matrix j_x =
          main_norm ? reverse_jacobian(norm_fn(p + ".ln_x.scale"), add_scaled(x, s, o)) : eye;

      jac.dxx = j_x * (eye + s * j_f * g);
      jac.dxy = j_x * (s * j_f * j_y);
      jac.dyx = j_f * g;
      jac.dyy = eye + j_f * j_y;
      break;
    }
  }
  return jac;
}

Matrix jacobian_bruteforce(const std::function<std::vector<double>(std::span<const double>)>& f,
                           std::span<const double> at, double h) {
  std::vector<double> point(at.begin(), at.end());
  std::vector<double> plus, minus;
  Matrix jac;
  for (std::size_t col = 0; col < point.size(); ++col) {
    const double original = point[col];
    point[col] = original + h;
    plus = f(point);
    point[col] = original - h;
    minus = f(point);
    point[col] = original;
    if (col == 0) {
      jac.resize(static_cast<Eigen::Index>(plus.size()), static_cast<Eigen::Index>(at.size()));
    }
    for (std::size_t r = 0; r < plus.size(); ++r) {
      jac(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col)) =
          (plus[r] - minus[r]) / (2.0 * h);
    }
  }
  return jac;
}

Matrix jacobian_bruteforce(const ModelConfig& c, const ParamSet& params,
                           const StreamState& state, std::size_t i, double h) {
  c.validate();
  if (i >= c.n_sublayers()) throw ContractError("sub-layer index out of range");
  const bool two = is_two_stream(c.topology);
  require_single_token(state, two);
  const std::size_t d = c.d_model;
  const Shape shape{1, 1, d};

  auto layer = [&](std::span<const double> v) {
    Tape tape;
    StreamVars in;
    in.x = tape.constant(Tensor(shape, std::vector<double>(v.begin(), v.begin() + d)));
    if (two) {
      in.y = tape.constant(Tensor(shape, std::vector<double>(v.begin() + d, v.end())));
    }
    const BlockParams block = bind_block(tape, params, c, i);
    const SublayerNorms norms = bind_norms(tape, params, c, i);
    const LayerStep step = layer_forward(c, in, block, norms, i);
    if (step.diverged) {
      throw DivergenceError("layer produced non-finite values during differencing", i);
    }
    std::optional<Tensor> y_out;
    if (step.next.y) y_out = step.next.y->value();
    return flat(step.next.x.value(), y_out);
  };
  const std::vector<double> at = flat(state.x, two ? state.y : std::nullopt);
  return jacobian_bruteforce(layer, at, h);
}

SpectralNorm spectral_norm(const Matrix& m, std::size_t max_iters, double tol) {
  if (!m.allFinite()) throw DivergenceError("spectral_norm on a non-finite matrix");
  SpectralNorm result;
  if (m.size() == 0 || m.isZero(0.0)) {
    result.converged = true;
    return result;
  }
  std::mt19937_64 rng(0x5eed);
  std::uniform_real_distribution<double> unit(0.5, 1.5);
  Eigen::VectorXd v(m.cols());
  for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = unit(rng);
  v.normalize();

  double previous = 0.0;
  for (std::size_t it = 1; it <= max_iters; ++it) {
    const Eigen::VectorXd mv = m * v;
    Eigen::VectorXd w = m.transpose() * mv;
    const double lambda = w.norm();
    result.iterations = it;
    if (lambda == 0.0) {
      // v landed in the null space; the largest singular value along this
      // start is zero only if m is zero, which was handled above.
      for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = unit(rng);
      v.normalize();
      continue;
    }
    result.value = std::sqrt(lambda);
    v = w / lambda;
    if (std::abs(result.value - previous) <= tol * std::max(1.0, result.value)) {
      result.converged = true;
      break;
    }
    previous = result.value;
  }
  return result;
}

std::vector<ProfileRow> magnitude_profile(const std::vector<StreamState>& trace) {
  if (trace.empty()) throw ContractError("magnitude_profile needs a non-empty trace");
  std::vector<ProfileRow> rows;
  rows.reserve(trace.size());
  auto mean_row_norm = [](const Tensor& t) {
    double total = 0.0;
    for (std::size_t r = 0; r < t.rows(); ++r) total += l2_norm(t.row(r));
    return t.rows() == 0 ? 0.0 : total / static_cast<double>(t.rows());
  };
  for (const auto& s : trace) {
    ProfileRow row;
    row.layer = s.layer_index;
    row.magnitude_x = mean_row_norm(s.x);
    if (s.y) row.magnitude_y = mean_row_norm(*s.y);
    rows.push_back(row);
  }
  return rows;
}

GradNormProfile grad_norm_profile(const ParamSet& params, const ModelConfig& c) {
  GradNormProfile out;
  std::vector<double> sub_sq(c.n_sublayers(), 0.0);
  double embed_sq = 0.0, unembed_sq = 0.0, final_sq = 0.0, total_sq = 0.0;
  for (const auto& p : params) {
    double sq = 0.0;
    for (double g : p.grad.data()) sq += g * g;
    total_sq += sq;
    if (p.name.starts_with("layer.")) {
      const std::size_t dot = p.name.find('.', 6);
      const std::size_t layer = std::stoul(p.name.substr(6, dot - 6));
      const bool attn = p.name.compare(dot + 1, 5, "attn.") == 0;
      const std::size_t i = 2 * layer + (attn ? 0 : 1);
      if (i < sub_sq.size()) sub_sq[i] += sq;
    } else if (p.name.starts_with("embed.")) {
      embed_sq += sq;
    } else if (p.name == "unembed") {
      unembed_sq += sq;
    } else if (p.name.starts_with("final_norm")) {
      final_sq += sq;
    }
  }
  for (double sq : sub_sq) out.sublayer.push_back(std::sqrt(sq));
  out.embedding = std::sqrt(embed_sq);
  out.unembedding = std::sqrt(unembed_sq);
  out.final_norm = std::sqrt(final_sq);
  out.global = std::sqrt(total_sq);
  return out;
}

ContributionRatio contribution_ratio(double m_x, double m_y) {
  const double total = m_x + m_y;
  if (total == 0.0) return {0.5, 0.5};
  return {m_x / total, m_y / total};
}

std::vector<ContributionRatio> stream_contribution_ratios(const ModelConfig& c,
                                                          const ParamSet& params) {
  if (!is_siamese(c.topology)) {
    throw ContractError("contribution ratios are defined for Siamese topologies only");
  }
  const bool practical = c.topology == TopologyKind::kSiamesePractical;
  std::vector<ContributionRatio> out;
  std::string last_x_scale = "embed.ln_x.scale";
  for (std::size_t i = 0; i < c.n_sublayers(); ++i) {
    const std::string p = sublayer_prefix(i);
    const double m_y = mean_abs(params.at(p + ".ln_y.scale").value);
    const double m_x = practical && is_attention(i)
                           ? mean_abs(params.at(p + ".gamma").value)
                           : mean_abs(params.at(last_x_scale).value);
    out.push_back(contribution_ratio(m_x, m_y));
    if (!practical || is_attention(i)) last_x_scale = p + ".ln_x.scale";
  }
  out.push_back(contribution_ratio(mean_abs(params.at(last_x_scale).value),
                                   mean_abs(params.at("final_norm.scale").value)));
  return out;
}

void attach_ratios(std::vector<ProfileRow>& rows, const std::vector<ContributionRatio>& ratios) {
  for (std::size_t k = 0; k < rows.size() && k < ratios.size(); ++k) {
    rows[k].ratio_x = ratios[k].ratio_x;
    rows[k].ratio_y = ratios[k].ratio_y;
  }
}

void attach_grad_norms(std::vector<ProfileRow>& rows, const GradNormProfile& grads) {
  for (std::size_t k = 0; k < rows.size() && k < grads.sublayer.size(); ++k) {
    rows[k].grad_norm = grads.sublayer[k];
  }
}

LensMatch logit_lens_match(const Tensor& x_final, const Tensor& y_final,
                           const Tensor& fused_logits, const Tensor& unembed, double eps,
                           std::span<const int> targets) {
  if (x_final.numel() == 0 || fused_logits.numel() == 0) {
    throw ContractError("logit lens needs non-empty inputs");
  }
  if (x_final.shape() != y_final.shape()) {
    throw DimensionError("stream states differ in shape: " + shape_string(x_final.shape()) +
                         " vs " + shape_string(y_final.shape()));
  }
  if (unembed.rank() != 2 || unembed.dim(0) != x_final.last_dim() ||
      fused_logits.last_dim() != unembed.dim(1) || fused_logits.rows() != x_final.rows()) {
    throw DimensionError("logit lens shapes disagree: hidden " + shape_string(x_final.shape()) +
                         ", unembed " + shape_string(unembed.shape()) + ", logits " +
                         shape_string(fused_logits.shape()));
  }
  if (!targets.empty() && targets.size() != x_final.rows()) {
    throw DimensionError("logit lens target mask length differs from position count");
  }

  const std::size_t d = x_final.last_dim();
  const std::size_t V = unembed.dim(1);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> u(
      unembed.data().data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(V));

  auto lens_argmax = [&](std::span<const double> h) {
    double ms = 0.0;
    for (double v : h) ms += v * v;
    const double denom = ms / static_cast<double>(d) + eps;
    const double inv = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
    Eigen::RowVectorXd hv(static_cast<Eigen::Index>(d));
    for (std::size_t k = 0; k < d; ++k) hv(static_cast<Eigen::Index>(k)) = h[k] * inv;
    const Eigen::RowVectorXd logits = hv * u;
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<std::size_t>(best);
  };
  auto argmax = [](std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  };

  LensMatch out;
  std::size_t hit_x = 0, hit_y = 0, div_x = 0, div_y = 0;
  for (std::size_t r = 0; r < x_final.rows(); ++r) {
    if (!targets.empty() && targets[r] == kIgnoreTarget) continue;
    const std::size_t fused = argmax(fused_logits.row(r));
    const std::size_t ax = lens_argmax(x_final.row(r));
    const std::size_t ay = lens_argmax(y_final.row(r));
    ++out.positions;
    hit_x += ax == fused;
    hit_y += ay == fused;
    if (ax != ay) {
      ++out.divergent_positions;
      div_x += ax == fused;
      div_y += ay == fused;
    }
  }
  if (out.positions == 0) throw ContractError("logit lens has no unmasked positions");
  const auto n = static_cast<double>(out.positions);
  out.match_x = static_cast<double>(hit_x) / n;
  out.match_y = static_cast<double>(hit_y) / n;
  if (out.divergent_positions > 0) {
    const auto nd = static_cast<double>(out.divergent_positions);
    out.divergent_align_x = static_cast<double>(div_x) / nd;
    out.divergent_align_y = static_cast<double>(div_y) / nd;
  }
  return out;
}

}  // namespace siamese
