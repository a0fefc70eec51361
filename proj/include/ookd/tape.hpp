#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ookd/tensor.hpp"

namespace ookd::nn {

class Tape;

// Trainable weight with an externally accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

  void zero_grad() { grad.fill(0.0); }
};

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool defined() const { return tape != nullptr; }
  const Tensor& val() const;
};

// Eager reverse-mode tape. Ops compute values immediately and record a
// backward closure; backward() walks nodes in reverse creation order, so
// the graph is always topologically sorted.
class Tape {
 public:
  // Constant input; gradients are not propagated past it.
  Var leaf(Tensor v);
  // Leaf whose gradient is kept readable after backward().
  Var input(Tensor v);
  // Leaf bound to a Parameter; backward() accumulates into p.grad.
  Var param(Parameter& p);

  void backward(Var root);

  const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  // Gradient of the last backward() w.r.t. v; zeros if v was not reached.
  Tensor grad(Var v) const;

  size_t size() const { return nodes_.size(); }

  // --- internal plumbing for op implementations ---
  struct Node {
    Tensor value;
    Tensor grad;  // lazily allocated during backward
    std::function<void(Tape&, int)> backward;
    Parameter* bound = nullptr;
  };

  int emplace(Tensor value, std::function<void(Tape&, int)> back);
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  // Accumulate g into the gradient buffer of node id.
  void accum(int id, const Tensor& g);
  bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad.defined(); }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::val() const { return tape->value(*this); }

// --- elementwise / arithmetic ---
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// Elementwise a/b; b must have the same shape as a or be a 1-element scalar.
Var vdiv(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var vabs(Var a);
Var vmax(Var a, Var b);
Var vmin(Var a, Var b);
Var relu(Var a);
Var sigmoid(Var a);
// Elementwise square root; inputs must be positive.
Var vsqrt(Var a);
// Elementwise natural log; inputs must be positive.
Var vlog(Var a);
// Adds a 1 x C row to every row of an R x C matrix.
Var add_row(Var x, Var row);

// --- reductions ---
Var vsum(Var a);
Var vmean(Var a);

// --- linear algebra / shaping ---
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, std::vector<int> shape);
Var slice_cols(Var a, int start, int len);
Var slice_rows(Var a, int start, int len);
Var concat_cols(const std::vector<Var>& vs);
Var concat_rows(const std::vector<Var>& vs);
Var gather_rows(Var a, std::vector<int> idx);

// --- nonlinear blocks ---
Var softmax_rows(Var a);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
// Row-wise L2 normalization. Rows with norm below 1e-12 map to the fixed
// unit vector e0 (zero subgradient), so every output row has norm exactly 1.
Var unit_rows(Var x);

// --- convolution ---
// x: [Cin, H, W]; w: [Cout, Cin*k*k]; b: [Cout]; square kernel k, zero padding.
Var conv2d(Var x, Var w, Var b, int k, int stride, int pad);

// --- losses ---
// Mean over rows of per-row weighted cross entropy:
//   sum_i w_i * (logsumexp(row_i) - row_i[t_i]) / sum_i w_i
Var weighted_ce_rows(Var logits, std::vector<int> targets, std::vector<double> weights);
// Numerically stable mean binary cross entropy with logits; targets in [0,1].
Var bce_with_logits_mean(Var logits, Tensor targets);

}  // namespace ookd::nn
