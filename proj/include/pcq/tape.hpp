#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape is built fresh for every forward pass. Leaves are either constants
// or variables; every op records its forward value and a closure that
// scatters the incoming gradient into its parents. Only nodes that depend on
// a variable carry gradient buffers, so frozen weights never receive one.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pcq/diffcore.hpp"
#include "pcq/matrix.hpp"

namespace pcq::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push_leaf(std::move(value), false); }
  Var variable(Matrix value) { return push_leaf(std::move(value), true); }

  Var push(Matrix value, std::vector<std::size_t> parents, Backward backward, const char* op) {
    if (!value.all_finite()) throw Error(std::string("non-finite value produced by ") + op);
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].needs_grad;
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    n.parents = std::move(parents);
    if (needs) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient of the last backward() target w.r.t. node `id`; nullptr when the
  // node carries no gradient (constant, or not upstream of the target).
  const Matrix* grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() && n.value.size() != 0 ? nullptr : &n.grad;
  }

  // Accumulation buffer for a parent, allocated on first use.
  Matrix& accum(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  const Matrix& incoming(std::size_t self) const { return nodes_[self].grad; }

  void backward(Var loss) {
    if (loss.tape != this) throw Error("backward: variable belongs to another tape");
    const Node& root = nodes_[loss.id];
    if (root.value.rows() != 1 || root.value.cols() != 1)
      throw Error("backward: target must be a 1x1 scalar");
    for (Node& n : nodes_) n.grad = Matrix();
    if (!root.needs_grad) return;
    accum(loss.id)(0, 0) = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::vector<std::size_t> parents;
    Backward backward;
  };

  Var push_leaf(Matrix value, bool requires_grad) {
    if (!value.all_finite()) throw Error("non-finite input");
    Node n;
    n.value = std::move(value);
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {

inline void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

inline void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("variables belong to different tapes");
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::check_same_tape(a, b);
  Matrix out = pcq::matmul(a.value(), b.value());
  return a.tape->push(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    if (t.needs_grad(a.id)) detail::add_into(t.accum(a.id), matmul_bt(g, t.value(b.id)));
    if (t.needs_grad(b.id)) detail::add_into(t.accum(b.id), matmul_at(t.value(a.id), g));
  }, "matmul");
}

// a * b^T
inline Var matmul_bt(Var a, Var b) {
  detail::check_same_tape(a, b);
  Matrix out = pcq::matmul_bt(a.value(), b.value());
  return a.tape->push(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    if (t.needs_grad(a.id)) detail::add_into(t.accum(a.id), pcq::matmul(g, t.value(b.id)));
    if (t.needs_grad(b.id)) detail::add_into(t.accum(b.id), matmul_at(g, t.value(a.id)));
  }, "matmul_bt");
}

inline Var add(Var a, Var b) {
  detail::check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  detail::add_into(out, b.value());
  return a.tape->push(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    if (t.needs_grad(a.id)) detail::add_into(t.accum(a.id), g);
    if (t.needs_grad(b.id)) detail::add_into(t.accum(b.id), g);
  }, "add");
}

inline Var sub(Var a, Var b) {
  detail::check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.value().data()[i];
  return a.tape->push(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    if (t.needs_grad(a.id)) detail::add_into(t.accum(a.id), g);
    if (t.needs_grad(b.id)) {
      Matrix& gb = t.accum(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] -= g.data()[i];
    }
  }, "sub");
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::check_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.value().data()[i];
  return a.tape->push(std::move(out), {a.id, b.id}, [a, b](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    if (t.needs_grad(a.id)) {
      Matrix& ga = t.accum(a.id);
      const Matrix& bv = t.value(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * bv.data()[i];
    }
    if (t.needs_grad(b.id)) {
      Matrix& gb = t.accum(b.id);
      const Matrix& av = t.value(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] += g.data()[i] * av.data()[i];
    }
  }, "mul");
}

// Elementwise product with a constant matrix.
inline Var mul_const(Var a, const Matrix& c) {
  require_same_shape(a.value(), c, "mul_const");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= c.data()[i];
  return a.tape->push(std::move(out), {a.id}, [a, c](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    Matrix& ga = t.accum(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * c.data()[i];
  }, "mul_const");
}

inline Var add_const(Var a, const Matrix& c) {
  require_same_shape(a.value(), c, "add_const");
  Matrix out = a.value();
  detail::add_into(out, c);
  return a.tape->push(std::move(out), {a.id}, [a](Tape& t, std::size_t self) {
    detail::add_into(t.accum(a.id), t.incoming(self));
  }, "add_const");
}

inline Var scale(Var a, double s) {
  Matrix out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape->push(std::move(out), {a.id}, [a, s](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    Matrix& ga = t.accum(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += s * g.data()[i];
  }, "scale");
}

// a (n x c) + row (1 x c) broadcast over rows.
inline Var add_row(Var a, Var row) {
  detail::check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols())
    throw Error("dimension mismatch in add_row: " + shape_str(a.value()) + " + " +
                shape_str(row.value()));
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += row.value()(0, j);
  return a.tape->push(std::move(out), {a.id, row.id}, [a, row](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    if (t.needs_grad(a.id)) detail::add_into(t.accum(a.id), g);
    if (t.needs_grad(row.id)) {
      Matrix& gr = t.accum(row.id);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
    }
  }, "add_row");
}

// Repeats a 1 x c row n times.
inline Var tile_rows(Var row, std::size_t n) {
  if (row.rows() != 1) throw Error("tile_rows: expected a single row");
  Matrix out(n, row.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < row.cols(); ++j) out(i, j) = row.value()(0, j);
  return row.tape->push(std::move(out), {row.id}, [row](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    Matrix& gr = t.accum(row.id);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
  }, "tile_rows");
}

// Row-major reinterpretation with a new shape of equal size.
inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.value().size()) throw Error("reshape: size mismatch");
  Matrix out(rows, cols, a.value().data());
  return a.tape->push(std::move(out), {a.id}, [a](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    Matrix& ga = t.accum(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
  }, "reshape");
}

inline Var tanh(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = std::tanh(v);
  return a.tape->push(std::move(out), {a.id}, [a](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.accum(a.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      ga.data()[i] += g.data()[i] * (1.0 - y.data()[i] * y.data()[i]);
  }, "tanh");
}

inline Var exp(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = std::exp(v);
  return a.tape->push(std::move(out), {a.id}, [a](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.accum(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * y.data()[i];
  }, "exp");
}

inline Var log(Var a) {
  Matrix out = a.value();
  for (double& v : out.data()) {
    if (!(v > 0.0)) throw Error("log of non-positive value");
    v = std::log(v);
  }
  return a.tape->push(std::move(out), {a.id}, [a](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    const Matrix& x = t.value(a.id);
    Matrix& ga = t.accum(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] / x.data()[i];
  }, "log");
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->push(Matrix(1, 1, s), {a.id}, [a](Tape& t, std::size_t self) {
    const double g = t.incoming(self)(0, 0);
    for (double& v : t.accum(a.id).data()) v += g;
  }, "sum");
}

inline Var mean(Var a) {
  if (a.value().size() == 0) throw Error("mean of empty matrix");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

inline Var l2_normalize_rows(Var a) {
  Matrix out = pcq::l2_normalize_rows(a.value());
  return a.tape->push(std::move(out), {a.id}, [a](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    const Matrix& y = t.value(self);
    const Matrix& x = t.value(a.id);
    Matrix& ga = t.accum(a.id);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const double n = norm(x.row(i));
      const double gy = dot(g.row(i), y.row(i));
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += (g(i, j) - y(i, j) * gy) / n;
    }
  }, "l2_normalize_rows");
}

inline Var softmax_rows(Var a, double temperature = 1.0) {
  Matrix out = pcq::softmax_rows(a.value(), temperature);
  return a.tape->push(std::move(out), {a.id}, [a, temperature](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.accum(a.id);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const double gy = dot(g.row(i), y.row(i));
      for (std::size_t j = 0; j < g.cols(); ++j)
        ga(i, j) += y(i, j) * (g(i, j) - gy) / temperature;
    }
  }, "softmax_rows");
}

// n x c -> n x 1 log-sum-exp per row.
inline Var logsumexp_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    double mx = r[0];
    for (double v : r) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : r) z += std::exp(v - mx);
    out(i, 0) = mx + std::log(z);
  }
  return a.tape->push(std::move(out), {a.id}, [a](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    const Matrix& y = t.value(self);
    const Matrix& x = t.value(a.id);
    Matrix& ga = t.accum(a.id);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j)
        ga(i, j) += g(i, 0) * std::exp(x(i, j) - y(i, 0));
  }, "logsumexp_rows");
}

// out(i,0) = a(i, cols[i]).
inline Var pick_cols(Var a, std::vector<std::size_t> cols) {
  if (cols.size() != a.rows()) throw Error("pick_cols: index count mismatch");
  Matrix out(a.rows(), 1);
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= a.cols()) throw Error("pick_cols: index out of range");
    out(i, 0) = a.value()(i, cols[i]);
  }
  return a.tape->push(std::move(out), {a.id}, [a, cols = std::move(cols)](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    Matrix& ga = t.accum(a.id);
    for (std::size_t i = 0; i < cols.size(); ++i) ga(i, cols[i]) += g(i, 0);
  }, "pick_cols");
}

// K x d -> K x K matrix of squared Euclidean distances between rows.
inline Var pairwise_sq_dist(Var h) {
  const Matrix& x = h.value();
  const std::size_t k = x.rows();
  Matrix out(k, k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        const double diff = x(i, c) - x(j, c);
        s += diff * diff;
      }
      out(i, j) = s;
    }
  return h.tape->push(std::move(out), {h.id}, [h](Tape& t, std::size_t self) {
    const Matrix& g = t.incoming(self);
    const Matrix& x = t.value(h.id);
    Matrix& gh = t.accum(h.id);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.rows(); ++j) {
        if (i == j) continue;
        const double w = 2.0 * (g(i, j) + g(j, i));
        for (std::size_t c = 0; c < x.cols(); ++c) gh(i, c) += w * (x(i, c) - x(j, c));
      }
  }, "pairwise_sq_dist");
}

// Same value, no gradient.
inline Var detach(Var a) { return a.tape->constant(a.value()); }

// Forward value `hard`, backward passes straight through to `soft`.
inline Var straight_through(Var soft, const Matrix& hard) {
  require_same_shape(soft.value(), hard, "straight_through");
  return soft.tape->push(hard, {soft.id}, [soft](Tape& t, std::size_t self) {
    detail::add_into(t.accum(soft.id), t.incoming(self));
  }, "straight_through");
}

}  // namespace pcq::ad
