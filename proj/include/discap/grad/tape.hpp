#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "discap/grad/tensor.hpp"

namespace discap::grad {

enum class OpKind {
  leaf,
  matmul,
  add,
  multiply,
  sigmoid,
  tanh,
  relu,
  concat,
  slice,
  gather_rows,
  log_softmax,
  sum,
  mean,
  l2_normalize,
  scale,
  clamp_min_zero,
};

std::string_view to_string(OpKind kind);
// Throws on names that are not recorded operations.
OpKind parse_op_kind(std::string_view name);

// Handle to a node on a specific tape.
struct Var {
  std::size_t id = 0;
};

// Static operands that are not graph inputs.
struct OpAttrs {
  std::size_t begin = 0;             // slice
  std::size_t end = 0;               // slice
  std::vector<std::size_t> indices;  // gather_rows
  double factor = 1.0;               // scale
  bool transpose_rhs = false;        // matmul
};

// Reverse-mode tape. Nodes are appended in creation order, so input ids always
// precede the node that consumes them and backward is one reverse sweep.
//
// Notes on specific ops:
//  - concat flattens its inputs and returns a vector.
//  - slice takes a flat [begin, end) range of the input values.
//  - gather_rows picks elements of a vector or rows of a matrix; indices may
//    repeat and their gradients accumulate.
//  - log_softmax and l2_normalize act on a vector or on each row of a matrix.
//    l2_normalize throws on a zero-norm row.
//  - clamp_min_zero computes max(x, 0) with derivative 0 at x == 0.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(OpKind kind, std::span<const Var> inputs, OpAttrs attrs = {});

  Var matmul(Var a, Var b, bool transpose_rhs = false);
  Var add(Var a, Var b);
  Var multiply(Var a, Var b);
  Var sigmoid(Var x);
  Var tanh(Var x);
  Var relu(Var x);
  Var concat(std::initializer_list<Var> parts);
  Var concat(std::span<const Var> parts);
  Var slice(Var x, std::size_t begin, std::size_t end);
  Var gather_rows(Var x, std::vector<std::size_t> indices);
  Var log_softmax(Var x);
  Var sum(Var x);
  Var mean(Var x);
  Var l2_normalize(Var x);
  Var scale(Var x, double factor);
  Var clamp_min_zero(Var x);

  // Fills dLoss/dNode for every node that depends on a grad-requiring leaf.
  // Leaves that the loss does not reach receive a zero gradient.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  OpKind kind(Var v) const;
  std::span<const std::size_t> inputs(Var v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    OpAttrs attrs;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;
  Tensor& grad_slot(std::size_t id);
  void backprop_node(std::size_t id);

  std::vector<Node> nodes_;
};

// Max over coordinates of |analytic - central difference| /
// max(1e-8, |analytic| + |central difference|) for a scalar function of one
// tensor. Throws if the function evaluates to a non-finite value, naming the
// coordinate.
using ScalarFunction = std::function<Var(Tape&, Var)>;
double grad_check(const ScalarFunction& f, const Tensor& point, double epsilon);

}  // namespace discap::grad
