#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation applied to its Vars; backward() walks the
// record in reverse and accumulates adjoints. Every op in this header has a
// twin in ops.hpp operating on plain Matrix values so model code can be
// written once and evaluated either with or without gradients.

#include "vibo/common.hpp"
#include "vibo/param_store.hpp"

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>

namespace vibo::ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // A leaf that receives a gradient but is not backed by a ParamStore.
  Var variable(Matrix value);
  // A leaf bound to a named tensor of `store`; repeated calls return the same Var.
  Var parameter(const ParamStore& store, const std::string& name);

  // Seeds d(root)/d(root) = 1 and propagates. `root` must be 1x1.
  void backward(const Var& root);

  // Gradients of every parameter of `store` touched by this tape.
  Gradient gradient(const ParamStore& store) const;
  // Gradient reaching a leaf created by variable() or parameter().
  Matrix gradient(const Var& leaf) const;

  std::size_t size() const { return nodes_.size(); }

  // Op construction; used by the free functions in this namespace.
  Var push(Matrix value, const char* op, std::initializer_list<Var> parents, BackwardFn fn);
  const Matrix& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  template <class Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    const char* op = "";
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var leaf(Matrix value, const char* op, bool requires_grad);

  std::deque<Node> nodes_;
  std::map<std::pair<const ParamStore*, std::string>, int> params_;
};

// Shape-preserving elementwise ops.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var log_sigmoid(const Var& a);
Var tanh(const Var& a);
Var elu(const Var& a);
Var square(const Var& a);
Var log1mexp(const Var& a);  // log(1 - e^a), a < 0
Var normal_cdf(const Var& a);
Var logaddexp(const Var& a, const Var& b);
Var clamp_max(const Var& a, double limit);

// Broadcasting: `row` is 1xC, `col` is Rx1.
Var add_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);
Var mul_col(const Var& a, const Var& col);

Var matmul(const Var& a, const Var& b);

// Reductions.
Var sum(const Var& a);     // -> 1x1
Var rowsum(const Var& a);  // -> Rx1
Var colsum(const Var& a);  // -> 1xC

// Row routing. gather: out.row(r) = a.row(idx[r]).
// segment_sum: out.row(seg[r]) += a.row(r), out has `segments` rows.
Var gather_rows(const Var& a, const IndexList& idx);
Var segment_sum(const Var& a, const IndexList& seg, Index segments);

Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& a, Index start, Index count);
Var transpose(const Var& a);

}  // namespace vibo::ad
