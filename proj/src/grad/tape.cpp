#include "discap/grad/tape.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <utility>

#include "discap/error.hpp"

namespace discap::grad {
namespace {

constexpr std::array<std::pair<OpKind, std::string_view>, 16> kOpNames{{
    {OpKind::leaf, "leaf"},
    {OpKind::matmul, "matmul"},
    {OpKind::add, "add"},
    {OpKind::multiply, "elementwise-multiply"},
    {OpKind::sigmoid, "sigmoid"},
    {OpKind::tanh, "tanh"},
    {OpKind::relu, "relu"},
    {OpKind::concat, "concat"},
    {OpKind::slice, "slice"},
    {OpKind::gather_rows, "gather-rows"},
    {OpKind::log_softmax, "log-softmax"},
    {OpKind::sum, "sum"},
    {OpKind::mean, "mean"},
    {OpKind::l2_normalize, "l2-normalize"},
    {OpKind::scale, "scalar-multiply"},
    {OpKind::clamp_min_zero, "clamp-min-zero"},
}};

[[noreturn]] void shape_error(OpKind kind, const std::vector<const Tensor*>& ins,
                              const std::string& what) {
  std::string msg = std::string(to_string(kind)) + ": " + what + " (input shapes";
  for (const Tensor* t : ins) msg += " " + shape_string(t->shape);
  msg += ")";
  fail(msg);
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Rows for ops that act on a vector or on each row of a matrix.
std::pair<std::size_t, std::size_t> row_layout(const Tensor& t) {
  if (t.rank() == 2) return {t.shape[0], t.shape[1]};
  return {1, t.size()};
}

Tensor forward(OpKind kind, const std::vector<const Tensor*>& in, const OpAttrs& attrs) {
  auto expect_arity = [&](std::size_t n) {
    if (in.size() != n)
      shape_error(kind, in, "expected " + std::to_string(n) + " inputs, got " +
                                std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::leaf:
      fail("record: leaf nodes are created with Tape::leaf");
    case OpKind::matmul: {
      expect_arity(2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.rank() != 2) shape_error(kind, in, "left operand must be a matrix");
      const std::size_t m = a.shape[0], k = a.shape[1];
      if (b.rank() == 1) {
        if (attrs.transpose_rhs || b.shape[0] != k) shape_error(kind, in, "inner dimensions differ");
        Tensor out = Tensor::zeros({m});
        for (std::size_t i = 0; i < m; ++i) {
          const double* row = &a.values[i * k];
          double acc = 0.0;
          for (std::size_t j = 0; j < k; ++j) acc += row[j] * b.values[j];
          out.values[i] = acc;
        }
        return out;
      }
      if (b.rank() != 2) shape_error(kind, in, "right operand must be a vector or matrix");
      const std::size_t bk = attrs.transpose_rhs ? b.shape[1] : b.shape[0];
      const std::size_t n = attrs.transpose_rhs ? b.shape[0] : b.shape[1];
      if (bk != k) shape_error(kind, in, "inner dimensions differ");
      Tensor out = Tensor::zeros({m, n});
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = &a.values[i * k];
        double* orow = &out.values[i * n];
        if (attrs.transpose_rhs) {
          for (std::size_t j = 0; j < n; ++j) {
            const double* brow = &b.values[j * k];
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            orow[j] = acc;
          }
        } else {
          for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = &b.values[p * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
          }
        }
      }
      return out;
    }
    case OpKind::add:
    case OpKind::multiply: {
      expect_arity(2);
      if (in[0]->shape != in[1]->shape) shape_error(kind, in, "shapes differ");
      Tensor out = *in[0];
      const auto& b = in[1]->values;
      if (kind == OpKind::add)
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += b[i];
      else
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= b[i];
      return out;
    }
    case OpKind::sigmoid:
    case OpKind::tanh:
    case OpKind::relu:
    case OpKind::clamp_min_zero: {
      expect_arity(1);
      Tensor out = *in[0];
      for (double& v : out.values) {
        if (kind == OpKind::sigmoid)
          v = sigmoid_scalar(v);
        else if (kind == OpKind::tanh)
          v = std::tanh(v);
        else
          v = v > 0.0 ? v : 0.0;
      }
      return out;
    }
    case OpKind::concat: {
      if (in.empty()) shape_error(kind, in, "needs at least one input");
      std::vector<double> values;
      std::size_t total = 0;
      for (const Tensor* t : in) total += t->size();
      values.reserve(total);
      for (const Tensor* t : in) values.insert(values.end(), t->values.begin(), t->values.end());
      return Tensor::vector(std::move(values));
    }
    case OpKind::slice: {
      expect_arity(1);
      if (attrs.begin >= attrs.end || attrs.end > in[0]->size())
        shape_error(kind, in,
                    "range [" + std::to_string(attrs.begin) + ", " + std::to_string(attrs.end) +
                        ") out of bounds");
      return Tensor::vector(std::vector<double>(in[0]->values.begin() + attrs.begin,
                                                in[0]->values.begin() + attrs.end));
    }
    case OpKind::gather_rows: {
      expect_arity(1);
      const Tensor& x = *in[0];
      if (attrs.indices.empty()) shape_error(kind, in, "empty index list");
      if (x.rank() != 1 && x.rank() != 2) shape_error(kind, in, "input must be a vector or matrix");
      const std::size_t rows = x.rank() == 2 ? x.shape[0] : x.size();
      const std::size_t width = x.rank() == 2 ? x.shape[1] : 1;
      std::vector<double> values;
      values.reserve(attrs.indices.size() * width);
      for (std::size_t idx : attrs.indices) {
        if (idx >= rows)
          shape_error(kind, in, "index " + std::to_string(idx) + " out of range");
        values.insert(values.end(), x.values.begin() + idx * width,
                      x.values.begin() + (idx + 1) * width);
      }
      if (x.rank() == 2) return Tensor::matrix(attrs.indices.size(), width, std::move(values));
      return Tensor::vector(std::move(values));
    }
    case OpKind::log_softmax: {
      expect_arity(1);
      if (in[0]->rank() > 2) shape_error(kind, in, "input must be a vector or matrix");
      Tensor out = *in[0];
      auto [rows, width] = row_layout(out);
      for (std::size_t r = 0; r < rows; ++r) {
        double* row = &out.values[r * width];
        const double mx = *std::max_element(row, row + width);
        double acc = 0.0;
        for (std::size_t j = 0; j < width; ++j) acc += std::exp(row[j] - mx);
        const double log_acc = std::log(acc);
        for (std::size_t j = 0; j < width; ++j) row[j] = (row[j] - mx) - log_acc;
      }
      return out;
    }
    case OpKind::sum:
    case OpKind::mean: {
      expect_arity(1);
      double acc = 0.0;
      for (double v : in[0]->values) acc += v;
      if (kind == OpKind::mean) acc /= static_cast<double>(in[0]->size());
      return Tensor::scalar(acc);
    }
    case OpKind::l2_normalize: {
      expect_arity(1);
      if (in[0]->rank() > 2) shape_error(kind, in, "input must be a vector or matrix");
      Tensor out = *in[0];
      auto [rows, width] = row_layout(out);
      for (std::size_t r = 0; r < rows; ++r) {
        double* row = &out.values[r * width];
        double sq = 0.0;
        for (std::size_t j = 0; j < width; ++j) sq += row[j] * row[j];
        if (!(sq > 0.0)) shape_error(kind, in, "zero-norm row " + std::to_string(r));
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t j = 0; j < width; ++j) row[j] *= inv;
      }
      return out;
    }
    case OpKind::scale: {
      expect_arity(1);
      Tensor out = *in[0];
      for (double& v : out.values) v *= attrs.factor;
      return out;
    }
  }
  fail("record: unknown op kind");
}

}  // namespace

std::string_view to_string(OpKind kind) {
  for (const auto& [k, name] : kOpNames)
    if (k == kind) return name;
  return "unknown";
}

OpKind parse_op_kind(std::string_view name) {
  for (const auto& [k, n] : kOpNames)
    if (n == name && k != OpKind::leaf) return k;
  fail("unknown op kind '" + std::string(name) + "'");
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n{OpKind::leaf, {}, {}, std::move(value), Tensor(), false, requires_grad};
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::record(OpKind kind, std::span<const Var> inputs, OpAttrs attrs) {
  std::vector<const Tensor*> in;
  std::vector<std::size_t> ids;
  in.reserve(inputs.size());
  ids.reserve(inputs.size());
  bool needs_grad = false;
  for (Var v : inputs) {
    const Node& n = node(v);
    in.push_back(&n.value);
    ids.push_back(v.id);
    needs_grad = needs_grad || n.requires_grad;
  }
  Tensor value = forward(kind, in, attrs);
  nodes_.push_back(Node{kind, std::move(ids), std::move(attrs), std::move(value), Tensor(), false,
                        needs_grad});
  return Var{nodes_.size() - 1};
}

Var Tape::matmul(Var a, Var b, bool transpose_rhs) {
  OpAttrs attrs;
  attrs.transpose_rhs = transpose_rhs;
  const Var in[] = {a, b};
  return record(OpKind::matmul, in, std::move(attrs));
}

Var Tape::add(Var a, Var b) {
  const Var in[] = {a, b};
  return record(OpKind::add, in);
}

Var Tape::multiply(Var a, Var b) {
  const Var in[] = {a, b};
  return record(OpKind::multiply, in);
}

Var Tape::sigmoid(Var x) { return record(OpKind::sigmoid, std::span<const Var>(&x, 1)); }
Var Tape::tanh(Var x) { return record(OpKind::tanh, std::span<const Var>(&x, 1)); }
Var Tape::relu(Var x) { return record(OpKind::relu, std::span<const Var>(&x, 1)); }

Var Tape::concat(std::initializer_list<Var> parts) {
  return record(OpKind::concat, std::span<const Var>(parts.begin(), parts.size()));
}

Var Tape::concat(std::span<const Var> parts) { return record(OpKind::concat, parts); }

Var Tape::slice(Var x, std::size_t begin, std::size_t end) {
  OpAttrs attrs;
  attrs.begin = begin;
  attrs.end = end;
  return record(OpKind::slice, std::span<const Var>(&x, 1), std::move(attrs));
}

Var Tape::gather_rows(Var x, std::vector<std::size_t> indices) {
  OpAttrs attrs;
  attrs.indices = std::move(indices);
  return record(OpKind::gather_rows, std::span<const Var>(&x, 1), std::move(attrs));
}

Var Tape::log_softmax(Var x) { return record(OpKind::log_softmax, std::span<const Var>(&x, 1)); }
Var Tape::sum(Var x) { return record(OpKind::sum, std::span<const Var>(&x, 1)); }
Var Tape::mean(Var x) { return record(OpKind::mean, std::span<const Var>(&x, 1)); }

Var Tape::l2_normalize(Var x) {
  return record(OpKind::l2_normalize, std::span<const Var>(&x, 1));
}

Var Tape::scale(Var x, double factor) {
  OpAttrs attrs;
  attrs.factor = factor;
  return record(OpKind::scale, std::span<const Var>(&x, 1), std::move(attrs));
}

Var Tape::clamp_min_zero(Var x) {
  return record(OpKind::clamp_min_zero, std::span<const Var>(&x, 1));
}

const Tape::Node& Tape::node(Var v) const {
  require(v.id < nodes_.size(), "Tape: node id " + std::to_string(v.id) + " not on this tape");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  require(n.has_grad, "Tape::grad: node " + std::to_string(v.id) + " has no gradient");
  return n.grad;
}

OpKind Tape::kind(Var v) const { return node(v).kind; }

std::span<const std::size_t> Tape::inputs(Var v) const { return node(v).inputs; }

Tensor& Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  const Node& root = node(loss);
  require(root.value.size() == 1, "backward: loss must be a scalar, got shape " +
                                      shape_string(root.value.shape));
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad_slot(loss.id).values[0] = 1.0;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    if (!nodes_[id].has_grad || !nodes_[id].requires_grad) continue;
    if (nodes_[id].kind != OpKind::leaf) backprop_node(id);
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id)
    if (nodes_[id].kind == OpKind::leaf) grad_slot(id);
}

void Tape::backprop_node(std::size_t id) {
  // grad_slot never resizes nodes_, so references into it stay valid here.
  const OpKind kind = nodes_[id].kind;
  const std::vector<std::size_t>& ins = nodes_[id].inputs;
  const Tensor& g = nodes_[id].grad;
  const Tensor& y = nodes_[id].value;
  auto wants = [&](std::size_t k) { return nodes_[ins[k]].requires_grad; };

  switch (kind) {
    case OpKind::leaf:
      return;
    case OpKind::matmul: {
      const Tensor& a = nodes_[ins[0]].value;
      const Tensor& b = nodes_[ins[1]].value;
      const bool trans = nodes_[id].attrs.transpose_rhs;
      const std::size_t m = a.shape[0], k = a.shape[1];
      if (b.rank() == 1) {
        if (wants(0)) {
          Tensor& ga = grad_slot(ins[0]);
          for (std::size_t i = 0; i < m; ++i) {
            const double gi = g.values[i];
            if (gi == 0.0) continue;
            double* row = &ga.values[i * k];
            for (std::size_t j = 0; j < k; ++j) row[j] += gi * b.values[j];
          }
        }
        if (wants(1)) {
          Tensor& gb = grad_slot(ins[1]);
          for (std::size_t i = 0; i < m; ++i) {
            const double gi = g.values[i];
            if (gi == 0.0) continue;
            const double* row = &a.values[i * k];
            for (std::size_t j = 0; j < k; ++j) gb.values[j] += gi * row[j];
          }
        }
        return;
      }
      const std::size_t n = trans ? b.shape[0] : b.shape[1];
      if (wants(0)) {
        Tensor& ga = grad_slot(ins[0]);
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = &g.values[i * n];
          double* garow = &ga.values[i * k];
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = grow[j];
            if (gij == 0.0) continue;
            if (trans) {
              const double* brow = &b.values[j * k];
              for (std::size_t p = 0; p < k; ++p) garow[p] += gij * brow[p];
            } else {
              for (std::size_t p = 0; p < k; ++p) garow[p] += gij * b.values[p * n + j];
            }
          }
        }
      }
      if (wants(1)) {
        Tensor& gb = grad_slot(ins[1]);
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = &g.values[i * n];
          const double* arow = &a.values[i * k];
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = grow[j];
            if (gij == 0.0) continue;
            if (trans) {
              double* gbrow = &gb.values[j * k];
              for (std::size_t p = 0; p < k; ++p) gbrow[p] += gij * arow[p];
            } else {
              for (std::size_t p = 0; p < k; ++p) gb.values[p * n + j] += gij * arow[p];
            }
          }
        }
      }
      return;
    }
    case OpKind::add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        Tensor& gx = grad_slot(ins[k]);
        for (std::size_t i = 0; i < g.size(); ++i) gx.values[i] += g.values[i];
      }
      return;
    }
    case OpKind::multiply: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        const Tensor& other = nodes_[ins[1 - k]].value;
        Tensor& gx = grad_slot(ins[k]);
        for (std::size_t i = 0; i < g.size(); ++i) gx.values[i] += g.values[i] * other.values[i];
      }
      return;
    }
    case OpKind::sigmoid: {
      Tensor& gx = grad_slot(ins[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx.values[i] += g.values[i] * y.values[i] * (1.0 - y.values[i]);
      return;
    }
    case OpKind::tanh: {
      Tensor& gx = grad_slot(ins[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx.values[i] += g.values[i] * (1.0 - y.values[i] * y.values[i]);
      return;
    }
    case OpKind::relu:
    case OpKind::clamp_min_zero: {
      const Tensor& x = nodes_[ins[0]].value;
      Tensor& gx = grad_slot(ins[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x.values[i] > 0.0) gx.values[i] += g.values[i];
      return;
    }
    case OpKind::concat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const std::size_t len = nodes_[ins[k]].value.size();
        if (wants(k)) {
          Tensor& gx = grad_slot(ins[k]);
          for (std::size_t i = 0; i < len; ++i) gx.values[i] += g.values[offset + i];
        }
        offset += len;
      }
      return;
    }
    case OpKind::slice: {
      const std::size_t begin = nodes_[id].attrs.begin;
      Tensor& gx = grad_slot(ins[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx.values[begin + i] += g.values[i];
      return;
    }
    case OpKind::gather_rows: {
      const Tensor& x = nodes_[ins[0]].value;
      const std::size_t width = x.rank() == 2 ? x.shape[1] : 1;
      const std::vector<std::size_t>& indices = nodes_[id].attrs.indices;
      Tensor& gx = grad_slot(ins[0]);
      for (std::size_t r = 0; r < indices.size(); ++r) {
        double* dst = &gx.values[indices[r] * width];
        const double* src = &g.values[r * width];
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
      return;
    }
    case OpKind::log_softmax: {
      auto [rows, width] = row_layout(y);
      Tensor& gx = grad_slot(ins[0]);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* grow = &g.values[r * width];
        const double* yrow = &y.values[r * width];
        double gsum = 0.0;
        for (std::size_t j = 0; j < width; ++j) gsum += grow[j];
        double* dst = &gx.values[r * width];
        for (std::size_t j = 0; j < width; ++j) dst[j] += grow[j] - std::exp(yrow[j]) * gsum;
      }
      return;
    }
    case OpKind::sum:
    case OpKind::mean: {
      Tensor& gx = grad_slot(ins[0]);
      double gv = g.values[0];
      if (kind == OpKind::mean) gv /= static_cast<double>(gx.size());
      for (double& v : gx.values) v += gv;
      return;
    }
    case OpKind::l2_normalize: {
      const Tensor& x = nodes_[ins[0]].value;
      auto [rows, width] = row_layout(y);
      Tensor& gx = grad_slot(ins[0]);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xrow = &x.values[r * width];
        const double* yrow = &y.values[r * width];
        const double* grow = &g.values[r * width];
        double sq = 0.0, dot = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
          sq += xrow[j] * xrow[j];
          dot += yrow[j] * grow[j];
        }
        const double inv = 1.0 / std::sqrt(sq);
        double* dst = &gx.values[r * width];
        for (std::size_t j = 0; j < width; ++j) dst[j] += (grow[j] - yrow[j] * dot) * inv;
      }
      return;
    }
    case OpKind::scale: {
      const double factor = nodes_[id].attrs.factor;
      Tensor& gx = grad_slot(ins[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx.values[i] += factor * g.values[i];
      return;
    }
  }
}

double grad_check(const ScalarFunction& f, const Tensor& point, double epsilon) {
  require(epsilon > 0.0, "grad_check: epsilon must be positive");
  Tensor analytic;
  {
    Tape tape;
    const Var x = tape.leaf(point);
    const Var y = f(tape, x);
    if (!std::isfinite(tape.value(y).item()))
      throw Error(ErrorCode::numerical_abort, "grad_check: non-finite value at the base point");
    tape.backward(y);
    analytic = tape.grad(x);
  }
  auto evaluate = [&](const Tensor& at, std::size_t coord) {
    Tape tape;
    const Var x = tape.leaf(at, false);
    const double v = tape.value(f(tape, x)).item();
    if (!std::isfinite(v))
      throw Error(ErrorCode::numerical_abort,
                  "grad_check: non-finite value at coordinate " + std::to_string(coord));
    return v;
  };
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe.values[i] = point.values[i] + epsilon;
    const double up = evaluate(probe, i);
    probe.values[i] = point.values[i] - epsilon;
    const double down = evaluate(probe, i);
    probe.values[i] = point.values[i];
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic.values[i];
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace discap::grad
