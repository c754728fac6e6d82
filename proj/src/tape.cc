#include "siamese/tape.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "siamese/errors.h"

namespace siamese {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

ConstMatMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}

MatMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

Tape& same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw ContractError("operands are not recorded on the same tape");
  }
  return *a.tape();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " +
                         shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Max-subtracted softmax of `row` written into `out`; -inf entries map to 0.
void softmax_into(std::span<const double> row, std::span<double> out) {
  double max = -std::numeric_limits<double>::infinity();
  for (double v : row) max = std::max(max, v);
  if (!std::isfinite(max)) throw MaskError("softmax row has no unmasked entry");
  double total = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    out[j] = std::exp(row[j] - max);
    total += out[j];
  }
  for (double& p : out) p /= total;
}

}  // namespace

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("value() on an unbound Var");
  return tape_->value(id_);
}

const Tensor& Var::grad() const {
  if (tape_ == nullptr) throw ContractError("grad() on an unbound Var");
  return tape_->grad(id_);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& param) {
  nodes_.push_back(Node{param.value, {}, {}, {}, &param, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  bool needs_grad = false;
  for (std::size_t id : inputs) needs_grad = needs_grad || nodes_[id].requires_grad;
  if (!needs_grad) backward = nullptr;
  nodes_.push_back(Node{std::move(value), {}, std::move(inputs), std::move(backward),
                        nullptr, needs_grad});
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::grad(std::size_t id) const {
  // Nodes never reached by the last backward pass report a zero adjoint.
  return const_cast<Tape*>(this)->grad_buffer(id);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.shape() != node.value.shape() || node.grad.numel() != node.value.numel()) {
    node.grad = Tensor::zeros_like(node.value);
  }
  return node.grad;
}

void Tape::backward(Var loss, double seed) {
  if (loss.tape() != this) throw ContractError("loss is not recorded on this tape");
  if (loss.value().numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(loss.shape()));
  }
  Tensor adjoint(loss.shape(), seed);
  run_backward(loss.id(), adjoint);
}

void Tape::backward_from(Var output, const Tensor& adjoint) {
  if (output.tape() != this) throw ContractError("output is not recorded on this tape");
  require_same_shape("backward_from", output.value(), adjoint);
  run_backward(output.id(), adjoint);
}

void Tape::run_backward(std::size_t root, const Tensor& adjoint) {
  for (auto& node : nodes_) node.grad = Tensor();
  nodes_[root].grad = adjoint;
  for (std::size_t id = root + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.grad.shape() != node.value.shape() ||
        node.grad.numel() != node.value.numel()) {
      continue;
    }
    if (node.backward) {
      BackwardContext ctx(*this, id);
      node.backward(ctx);
    }
    if (node.param != nullptr) {
      auto dst = node.param->grad.data();
      auto src = node.grad.data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
}

const Tensor& BackwardContext::in_value(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[k]].value;
}

bool BackwardContext::needs(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs[k]].requires_grad;
}

Tensor& BackwardContext::in_grad(std::size_t k) {
  return tape_.grad_buffer(tape_.nodes_[node_].inputs[k]);
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same_shape("add", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + y[i];
  return tape.record(std::move(out), {a.id(), b.id()}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs(k)) continue;
      Tensor& dst = ctx.in_grad(k);
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same_shape("sub", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] - y[i];
  return tape.record(std::move(out), {a.id(), b.id()}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    if (ctx.needs(0)) {
      Tensor& dst = ctx.in_grad(0);
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }
    if (ctx.needs(1)) {
      Tensor& dst = ctx.in_grad(1);
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same_shape("mul", x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
  return tape.record(std::move(out), {a.id(), b.id()}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& x = ctx.in_value(0);
    const Tensor& y = ctx.in_value(1);
    if (ctx.needs(0)) {
      Tensor& dst = ctx.in_grad(0);
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i] * y[i];
    }
    if (ctx.needs(1)) {
      Tensor& dst = ctx.in_grad(1);
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tape& tape = *a.tape();
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * factor;
  return tape.record(std::move(out), {a.id()}, [factor](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor& dst = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i] * factor;
  });
}

Var mul_lastdim(Var x, Var v) {
  Tape& tape = same_tape(x, v);
  const Tensor& xs = x.value();
  const Tensor& vs = v.value();
  if (vs.rank() != 1 || xs.rank() == 0 || xs.last_dim() != vs.dim(0)) {
    throw DimensionError("mul_lastdim shape mismatch: " + shape_string(xs.shape()) +
                         " vs " + shape_string(vs.shape()));
  }
  const std::size_t d = vs.numel();
  Tensor out(xs.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xs[i] * vs[i % d];
  return tape.record(std::move(out), {x.id(), v.id()}, [d](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& xs = ctx.in_value(0);
    const Tensor& vs = ctx.in_value(1);
    if (ctx.needs(0)) {
      Tensor& dst = ctx.in_grad(0);
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i] * vs[i % d];
    }
    if (ctx.needs(1)) {
      Tensor& dst = ctx.in_grad(1);
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i % d] += g[i] * xs[i];
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = *x.tape();
  Tensor out = x.value().reshaped(std::move(shape));
  return tape.record(std::move(out), {x.id()}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor& dst = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  });
}

Var sum(Var x) {
  Tape& tape = *x.tape();
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return tape.record(Tensor::scalar(total), {x.id()}, [](BackwardContext& ctx) {
    const double g = ctx.out_grad().item();
    for (double& d : ctx.in_grad(0).data()) d += g;
  });
}

Var half_sum_squares(Var x) {
  Tape& tape = *x.tape();
  double total = 0.0;
  for (double v : x.value().data()) total += v * v;
  return tape.record(Tensor::scalar(0.5 * total), {x.id()}, [](BackwardContext& ctx) {
    const double g = ctx.out_grad().item();
    const Tensor& xs = ctx.in_value(0);
    Tensor& dst = ctx.in_grad(0);
    for (std::size_t i = 0; i < xs.numel(); ++i) dst[i] += g * xs[i];
  });
}

Var silu(Var x) {
  Tape& tape = *x.tape();
  const Tensor& xs = x.value();
  Tensor out(xs.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xs[i] * sigmoid(xs[i]);
  return tape.record(std::move(out), {x.id()}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& xs = ctx.in_value(0);
    Tensor& dst = ctx.in_grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double s = sigmoid(xs[i]);
      dst[i] += g[i] * s * (1.0 + xs[i] * (1.0 - s));
    }
  });
}

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  if (x.rank() < 1 || w.rank() != 2 || x.last_dim() != w.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_string(x.shape()) + " vs " +
                         shape_string(w.shape()));
  }
  const std::size_t k = w.dim(0);
  const std::size_t n = w.dim(1);
  const std::size_t m = x.numel() / k;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(n);
  Tensor out(std::move(out_shape));
  as_matrix(out, m, n).noalias() = as_matrix(x, m, k) * as_matrix(w, k, n);
  return tape.record(std::move(out), {a.id(), b.id()}, [m, k, n](BackwardContext& ctx) {
    auto g = as_matrix(ctx.out_grad(), m, n);
    if (ctx.needs(0)) {
      as_matrix(ctx.in_grad(0), m, k).noalias() +=
          g * as_matrix(ctx.in_value(1), k, n).transpose();
    }
    if (ctx.needs(1)) {
      as_matrix(ctx.in_grad(1), k, n).noalias() +=
          as_matrix(ctx.in_value(0), m, k).transpose() * g;
    }
  });
}

Var rms_norm(Var x, std::optional<Var> scale_var, double eps) {
  Tape& tape = *x.tape();
  if (scale_var && scale_var->tape() != &tape) {
    throw ContractError("rms_norm scale is not recorded on the input's tape");
  }
  if (eps < 0.0) throw ContractError("rms_norm eps must be non-negative");
  const Tensor& xs = x.value();
  if (xs.rank() == 0 || xs.last_dim() == 0) {
    throw DimensionError("rms_norm needs a non-empty last axis, got " +
                         shape_string(xs.shape()));
  }
  const std::size_t d = xs.last_dim();
  const Tensor* scale = scale_var ? &scale_var->value() : nullptr;
  if (scale != nullptr && (scale->rank() != 1 || scale->dim(0) != d)) {
    throw DimensionError("rms_norm scale shape " + shape_string(scale->shape()) +
                         " does not match last axis of " + shape_string(xs.shape()));
  }

  auto inv_rms = [d, eps](std::span<const double> row) {
    double ms = 0.0;
    for (double v : row) ms += v * v;
    const double denom = ms / static_cast<double>(d) + eps;
    return denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
  };

  Tensor out(xs.shape());
  for (std::size_t r = 0; r < xs.rows(); ++r) {
    auto in_row = xs.row(r);
    auto out_row = out.row(r);
    const double inv = inv_rms(in_row);
    for (std::size_t j = 0; j < d; ++j) {
      out_row[j] = in_row[j] * inv * (scale != nullptr ? (*scale)[j] : 1.0);
    }
  }

  std::vector<std::size_t> inputs{x.id()};
  if (scale_var) inputs.push_back(scale_var->id());
  const bool has_scale = scale_var.has_value();
  return tape.record(std::move(out), std::move(inputs),
                     [d, has_scale, inv_rms](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& xs = ctx.in_value(0);
    const Tensor* scale = has_scale ? &ctx.in_value(1) : nullptr;
    const double fault = 1.0 + ctx.options().rms_norm_grad_fault;
    std::vector<double> gs(d);
    for (std::size_t r = 0; r < xs.rows(); ++r) {
      auto in_row = xs.row(r);
      auto g_row = g.row(r);
      const double inv = inv_rms(in_row);
      if (ctx.needs(0)) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          gs[j] = g_row[j] * (scale != nullptr ? (*scale)[j] : 1.0);
          dot += gs[j] * in_row[j];
        }
        const double coeff = inv * inv * inv * dot / static_cast<double>(d);
        auto dst = ctx.in_grad(0).row(r);
        for (std::size_t j = 0; j < d; ++j) {
          dst[j] += fault * (inv * gs[j] - coeff * in_row[j]);
        }
      }
      if (has_scale && ctx.needs(1)) {
        Tensor& dscale = ctx.in_grad(1);
        for (std::size_t j = 0; j < d; ++j) dscale[j] += g_row[j] * in_row[j] * inv;
      }
    }
  });
}

Var swiglu_mlp(Var x, Var w_gate, Var w_up, Var w_down) {
  Var gate = silu(matmul(x, w_gate));
  Var up = matmul(x, w_up);
  return matmul(mul(gate, up), w_down);
}

Var softmax_rows(Var x) {
  Tape& tape = *x.tape();
  const Tensor& xs = x.value();
  if (xs.rank() == 0 || xs.last_dim() == 0) {
    throw DimensionError("softmax_rows needs a non-empty last axis");
  }
  Tensor out(xs.shape());
  for (std::size_t r = 0; r < xs.rows(); ++r) softmax_into(xs.row(r), out.row(r));
  return tape.record(std::move(out), {x.id()}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& p = ctx.out_value();
    Tensor& dst = ctx.in_grad(0);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      auto p_row = p.row(r);
      auto g_row = g.row(r);
      double dot = 0.0;
      for (std::size_t j = 0; j < p_row.size(); ++j) dot += g_row[j] * p_row[j];
      auto d_row = dst.row(r);
      for (std::size_t j = 0; j < p_row.size(); ++j) d_row[j] += p_row[j] * (g_row[j] - dot);
    }
  });
}

Var causal_attention(Var q, Var k, Var v, std::size_t n_heads) {
  Tape& tape = same_tape(q, k);
  same_tape(q, v);
  const Tensor& qs = q.value();
  const Tensor& ks = k.value();
  const Tensor& vs = v.value();
  require_same_shape("causal_attention", qs, ks);
  require_same_shape("causal_attention", qs, vs);
  if (qs.rank() != 3) {
    throw DimensionError("causal_attention expects [B, T, d], got " +
                         shape_string(qs.shape()));
  }
  const std::size_t B = qs.dim(0);
  const std::size_t T = qs.dim(1);
  const std::size_t d = qs.dim(2);
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("head count " + std::to_string(n_heads) +
                         " does not divide width " + std::to_string(d));
  }
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[((b * H + h) * T + t) * T + s], zero for s > t.
  auto probs = std::make_shared<std::vector<double>>(B * n_heads * T * T, 0.0);
  Tensor out(qs.shape());
  std::vector<double> scores(T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t t = 0; t < T; ++t) {
        const double* q_row = &qs[(b * T + t) * d + c0];
        for (std::size_t s = 0; s <= t; ++s) {
          const double* k_row = &ks[(b * T + s) * d + c0];
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q_row[c] * k_row[c];
          scores[s] = dot * inv_sqrt;
        }
        double* p = &(*probs)[((b * n_heads + h) * T + t) * T];
        softmax_into(std::span<const double>(scores.data(), t + 1), std::span<double>(p, t + 1));
        double* o_row = &out[(b * T + t) * d + c0];
        for (std::size_t s = 0; s <= t; ++s) {
          const double* v_row = &vs[(b * T + s) * d + c0];
          for (std::size_t c = 0; c < dh; ++c) o_row[c] += p[s] * v_row[c];
        }
      }
    }
  }

  return tape.record(std::move(out), {q.id(), k.id(), v.id()},
                     [B, T, d, n_heads, dh, inv_sqrt, probs](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    const Tensor& qs = ctx.in_value(0);
    const Tensor& ks = ctx.in_value(1);
    const Tensor& vs = ctx.in_value(2);
    Tensor* dq = ctx.needs(0) ? &ctx.in_grad(0) : nullptr;
    Tensor* dk = ctx.needs(1) ? &ctx.in_grad(1) : nullptr;
    Tensor* dv = ctx.needs(2) ? &ctx.in_grad(2) : nullptr;
    std::vector<double> dp(T);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t t = 0; t < T; ++t) {
          const double* p = &(*probs)[((b * n_heads + h) * T + t) * T];
          const double* g_row = &g[(b * T + t) * d + c0];
          double weighted = 0.0;
          for (std::size_t s = 0; s <= t; ++s) {
            const double* v_row = &vs[(b * T + s) * d + c0];
            double dot = 0.0;
            for (std::size_t c = 0; c < dh; ++c) dot += g_row[c] * v_row[c];
            dp[s] = dot;
            weighted += p[s] * dot;
            if (dv != nullptr) {
              double* dv_row = &(*dv)[(b * T + s) * d + c0];
              for (std::size_t c = 0; c < dh; ++c) dv_row[c] += p[s] * g_row[c];
            }
          }
          const double* q_row = &qs[(b * T + t) * d + c0];
          for (std::size_t s = 0; s <= t; ++s) {
            const double dscore = p[s] * (dp[s] - weighted) * inv_sqrt;
            const double* k_row = &ks[(b * T + s) * d + c0];
            if (dq != nullptr) {
              double* dq_row = &(*dq)[(b * T + t) * d + c0];
              for (std::size_t c = 0; c < dh; ++c) dq_row[c] += dscore * k_row[c];
            }
            if (dk != nullptr) {
              double* dk_row = &(*dk)[(b * T + s) * d + c0];
              for (std::size_t c = 0; c < dh; ++c) dk_row[c] += dscore * q_row[c];
            }
          }
        }
      }
    }
  });
}

Var embedding(Var table, const TokenGrid& tokens) {
  Tape& tape = *table.tape();
  const Tensor& w = table.value();
  if (w.rank() != 2) throw DimensionError("embedding table must be [V, d]");
  if (tokens.ids.size() != tokens.batch * tokens.time) {
    throw DimensionError("token grid size does not match its batch x time shape");
  }
  const std::size_t V = w.dim(0);
  const std::size_t d = w.dim(1);
  for (int id : tokens.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw IndexError("token " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(V));
    }
  }
  Tensor out(Shape{tokens.batch, tokens.time, d});
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    auto src = w.row(static_cast<std::size_t>(tokens.ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return tape.record(std::move(out), {table.id()}, [ids = tokens.ids](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor& dst = ctx.in_grad(0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto g_row = g.row(i);
      auto d_row = dst.row(static_cast<std::size_t>(ids[i]));
      for (std::size_t j = 0; j < g_row.size(); ++j) d_row[j] += g_row[j];
    }
  });
}

Var positional(Var table, std::size_t batch, std::size_t time) {
  Tape& tape = *table.tape();
  const Tensor& w = table.value();
  if (w.rank() != 2) throw DimensionError("position table must be [S, d]");
  if (time > w.dim(0)) {
    throw DimensionError("sequence length " + std::to_string(time) +
                         " exceeds configured maximum " + std::to_string(w.dim(0)));
  }
  const std::size_t d = w.dim(1);
  Tensor out(Shape{batch, time, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < time; ++t) {
      auto src = w.row(t);
      std::copy(src.begin(), src.end(), out.row(b * time + t).begin());
    }
  }
  return tape.record(std::move(out), {table.id()}, [batch, time](BackwardContext& ctx) {
    const Tensor& g = ctx.out_grad();
    Tensor& dst = ctx.in_grad(0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < time; ++t) {
        auto g_row = g.row(b * time + t);
        auto d_row = dst.row(t);
        for (std::size_t j = 0; j < g_row.size(); ++j) d_row[j] += g_row[j];
      }
    }
  });
}

Var cross_entropy_logits(Var logits, std::span<const int> targets) {
  Tape& tape = *logits.tape();
  const Tensor& z = logits.value();
  if (z.rank() == 0) throw DimensionError("cross_entropy_logits needs [..., V] logits");
  const std::size_t V = z.last_dim();
  if (z.rows() != targets.size()) {
    throw DimensionError("cross_entropy_logits: " + std::to_string(z.rows()) +
                         " logit rows but " + std::to_string(targets.size()) + " targets");
  }
  std::size_t count = 0;
  for (int t : targets) {
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw IndexError("target " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(V));
    }
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy_logits: every target is ignored");

  double total = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    if (targets[r] == kIgnoreTarget) continue;
    auto row = z.row(r);
    const double max = *std::max_element(row.begin(), row.end());
    double acc = 0.0;
    for (double v : row) acc += std::exp(v - max);
    total += max + std::log(acc) - row[static_cast<std::size_t>(targets[r])];
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  std::vector<int> kept(targets.begin(), targets.end());
  return tape.record(Tensor::scalar(total * inv_count), {logits.id()},
                     [kept = std::move(kept), inv_count](BackwardContext& ctx) {
    const double g = ctx.out_grad().item() * inv_count;
    const Tensor& z = ctx.in_value(0);
    Tensor& dst = ctx.in_grad(0);
    std::vector<double> p(z.last_dim());
    for (std::size_t r = 0; r < z.rows(); ++r) {
      if (kept[r] == kIgnoreTarget) continue;
      softmax_into(z.row(r), p);
      auto d_row = dst.row(r);
      for (std::size_t j = 0; j < p.size(); ++j) d_row[j] += g * p[j];
      d_row[static_cast<std::size_t>(kept[r])] -= g;
    }
  });
}

}  // namespace siamese
