#pragma once

// Define-by-run reverse-mode differentiation over dense tensors.
//
// A Tape records every operation of one forward pass in execution order, so
// the node list is already a topological order and backward() is a single
// reverse sweep. Build a fresh tape per forward pass.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "wm/tensor.hpp"

namespace wm {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Constant input (no gradient).
  Var constant(Tensor value);
  /// Trainable leaf; counted by parameter_elements().
  Var parameter(Tensor value);
  /// Leaf that receives a gradient but is not counted as a parameter.
  Var variable(Tensor value);

  /// Reverse sweep from a scalar node. The upstream gradient of `loss` is
  /// `seed`. Clears any gradients from a previous sweep first.
  void backward(Var loss, double seed = 1.0);

  /// Gradient accumulated for `v` by the last backward(); zeros if none reached it.
  Tensor grad(Var v) const;
  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  std::size_t size() const { return nodes_.size(); }
  /// Total elements held by parameter leaves on this tape.
  std::size_t parameter_elements() const { return parameter_elements_; }

  // Used by op implementations.
  Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn);
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, bool requires_grad);
  void check_owner(Var v, const char* op) const;

  std::vector<Node> nodes_;
  std::size_t parameter_elements_ = 0;
};

// ---------------------------------------------------------------------------
// Operations. Every op checks shapes, throws DimensionError on mismatch, and
// NumericError if it produces a non-finite value.

/// [m x k] * [k x n] -> [m x n]
Var matmul(Var a, Var b);

/// Valid-padding, stride-1 cross-correlation.
/// x: [B x C x H x W], k: [F x C x Kh x Kw] -> [B x F x (H-Kh+1) x (W-Kw+1)]
Var conv2d(Var x, Var k);

Var relu(Var x);
Var add(Var a, Var b);
Var scale(Var x, double factor);

/// 2x2 window, stride 2, on the last two dims of [B x C x H x W]. Odd trailing
/// rows/columns are dropped.
Var maxpool2x2(Var x);

/// [B x ...] -> [B x prod(...)]
Var flatten(Var x);

/// Adds bias[j] along dim 1 of x ([B x N] or [B x C x H x W]).
Var add_bias(Var x, Var bias);

/// [B x F] ++ [B x G] -> [B x (F+G)]
Var concat_cols(Var a, Var b);

/// Row gather: table [V x D], indices (size B) -> [B x D].
Var embedding(Var table, std::span<const std::size_t> indices);

/// Per-example mixing of basis outputs:
/// out[i, ...] = sum_k coeffs[i * n + k] * parts[k][i, ...]
/// `coeffs` is constant (row-major [B x n]).
Var mix_rows(std::span<const Var> parts, std::span<const double> coeffs);

/// sum_k weights[k] * xs[k], all xs of one shape.
Var linear_combination(std::span<const Var> xs, std::span<const double> weights);

/// Mean over the batch of -log softmax(logits)[label].
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);

Var sum(Var x);
Var dot(Var a, Var b);

}  // namespace wm
