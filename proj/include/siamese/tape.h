#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "siamese/param_set.h"
#include "siamese/tensor.h"

namespace siamese {

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  // Adjoint from the most recent backward pass.
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Knobs that alter gradient rules. Only used to build negative controls for
// the gradient checker; a default-constructed value is always correct.
struct TapeOptions {
  double rms_norm_grad_fault = 0.0;
};

class BackwardContext;
using BackwardFn = std::function<void(BackwardContext&)>;

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and backward simply walks the node list in reverse. A tape is single
/// threaded; independent tapes share nothing.
class Tape {
 public:
  explicit Tape(TapeOptions options = {}) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Value that never receives a gradient.
  Var constant(Tensor value);
  // Free input whose adjoint is kept after backward.
  Var leaf(Tensor value);
  // Input bound to a parameter; backward adds its adjoint into param.grad.
  Var param(Parameter& param);

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  // Seeds the scalar `loss` with `seed` and propagates. Parameter gradients
  // accumulate across calls; node adjoints are reset at the start of each.
  void backward(Var loss, double seed = 1.0);
  // Vector-Jacobian product: seeds `output` with `adjoint` (same shape).
  void backward_from(Var output, const Tensor& adjoint);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const TapeOptions& options() const noexcept { return options_; }

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  void run_backward(std::size_t root, const Tensor& adjoint);
  Tensor& grad_buffer(std::size_t id);

  TapeOptions options_;
  std::deque<Node> nodes_;
};

// View handed to a node's gradient rule during backward.
class BackwardContext {
 public:
  const Tensor& out_value() const { return tape_.nodes_[node_].value; }
  const Tensor& out_grad() const { return tape_.nodes_[node_].grad; }
  const Tensor& in_value(std::size_t k) const;
  bool needs(std::size_t k) const;
  // Zero-initialised on first access within a backward pass.
  Tensor& in_grad(std::size_t k);
  const TapeOptions& options() const { return tape_.options_; }

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  Tape& tape_;
  std::size_t node_;
};

// Tokens laid out as a batch x time grid.
struct TokenGrid {
  std::size_t batch = 0;
  std::size_t time = 0;
  std::vector<int> ids;

  int at(std::size_t b, std::size_t t) const { return ids[b * time + t]; }
};

inline constexpr int kIgnoreTarget = -1;

// Elementwise and structural operations.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// x[..., d] * v[d]
Var mul_lastdim(Var x, Var v);
Var reshape(Var x, Shape shape);
Var sum(Var x);
// 0.5 * sum(x^2)
Var half_sum_squares(Var x);
Var silu(Var x);

// a[..., k] . b[k, n] -> [..., n]; leading axes of `a` are flattened.
Var matmul(Var a, Var b);

// Normalises the last axis to unit RMS: x / sqrt(mean(x^2) + eps) * scale.
// Without `scale` the normalisation is parameter-free.
Var rms_norm(Var x, std::optional<Var> scale, double eps);

// (silu(x . w_gate) * (x . w_up)) . w_down
Var swiglu_mlp(Var x, Var w_gate, Var w_up, Var w_down);

// Softmax over the last axis. -inf entries are masked; a row with no finite
// entry raises MaskError.
Var softmax_rows(Var x);

// Causal multi-head scaled dot-product attention on q, k, v of shape
// [B, T, d]; head h uses channels [h*d/H, (h+1)*d/H).
Var causal_attention(Var q, Var k, Var v, std::size_t n_heads);

// Rows of `table` [V, d] selected by the token grid -> [B, T, d].
Var embedding(Var table, const TokenGrid& tokens);
// Rows 0..T-1 of `table` [S, d] broadcast over batch -> [B, T, d].
Var positional(Var table, std::size_t batch, std::size_t time);

// Mean token cross-entropy over logits [..., V]; targets equal to
// kIgnoreTarget are excluded from both the sum and the count.
Var cross_entropy_logits(Var logits, std::span<const int> targets);

}  // namespace siamese
