#include "vibo/tape.hpp"

#include "vibo/ops.hpp"

#include <cmath>
#include <string>

namespace vibo::ad {

const Matrix& Var::value() const { return tape_->value_of(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("scalar() on a non-scalar Var");
  return v(0, 0);
}

Var Tape::leaf(Matrix value, const char* op, bool requires_grad) {
  if (!value.allFinite()) throw NumericalError(std::string("non-finite value in ") + op + " leaf");
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Matrix value) { return leaf(std::move(value), "constant", false); }

Var Tape::variable(Matrix value) { return leaf(std::move(value), "variable", true); }

Var Tape::parameter(const ParamStore& store, const std::string& name) {
  auto key = std::make_pair(&store, name);
  if (auto it = params_.find(key); it != params_.end()) return Var(this, it->second);
  Var v = leaf(store.value(name), "parameter", true);
  params_.emplace(std::move(key), v.id());
  return v;
}

Var Tape::push(Matrix value, const char* op, std::initializer_list<Var> parents, BackwardFn fn) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape_ != this) throw DimensionError(std::string(op) + ": operands live on different tapes");
    needs = needs || requires_grad(p.id());
  }
  if (!value.allFinite())
    throw NumericalError(std::string("non-finite value produced by ") + op + " (node " +
                         std::to_string(nodes_.size()) + ")");
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::backward(const Var& root) {
  if (root.tape_ != this) throw DimensionError("backward: root from another tape");
  if (root.value().size() != 1) throw DimensionError("backward: root must be a scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  accumulate(root.id(), Matrix::Ones(1, 1));
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    if (!n.grad.allFinite())
      throw NumericalError(std::string("non-finite gradient flowing into ") + n.op + " (node " +
                           std::to_string(id) + ")");
    n.backward(*this, n.grad);
  }
}

Gradient Tape::gradient(const ParamStore& store) const {
  Gradient out;
  for (const auto& [key, id] : params_) {
    if (key.first != &store) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Matrix g = n.grad.size() ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols());
    if (!g.allFinite()) throw NumericalError("non-finite gradient for tensor '" + key.second + "'");
    out.emplace(key.second, std::move(g));
  }
  return out;
}

Matrix Tape::gradient(const Var& leaf) const {
  const Node& n = nodes_[static_cast<std::size_t>(leaf.id())];
  return n.grad.size() ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols());
}

namespace {

// Unary elementwise op whose local derivative is a function of (x, y).
template <class Fwd, class Deriv>
Var unary(const Var& a, const char* op, Fwd fwd, Deriv deriv) {
  Matrix y = fwd(a.value());
  const int ia = a.id();
  const int iy = static_cast<int>(a.tape().size());
  return a.tape().push(std::move(y), op, {a}, [ia, iy, deriv](Tape& t, const Matrix& g) {
    const Matrix& x = t.value_of(ia);
    const Matrix& y = t.value_of(iy);
    Matrix local(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) local.data()[i] = deriv(x.data()[i], y.data()[i]);
    t.accumulate(ia, g.cwiseProduct(local));
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  const int ia = a.id(), ib = b.id();
  return a.tape().push(ad::add(a.value(), b.value()), "add", {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(const Var& a, const Var& b) {
  const int ia = a.id(), ib = b.id();
  return a.tape().push(ad::sub(a.value(), b.value()), "sub", {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  const int ia = a.id(), ib = b.id();
  return a.tape().push(ad::mul(a.value(), b.value()), "mul", {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(t.value_of(ib)));
    t.accumulate(ib, g.cwiseProduct(t.value_of(ia)));
  });
}

Var div(const Var& a, const Var& b) {
  const int ia = a.id(), ib = b.id();
  return a.tape().push(ad::div(a.value(), b.value()), "div", {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    const Matrix& x = t.value_of(ia);
    const Matrix& y = t.value_of(ib);
    t.accumulate(ia, g.cwiseQuotient(y));
    t.accumulate(ib, (-g.array() * x.array() / y.array().square()).matrix());
  });
}

Var neg(const Var& a) {
  const int ia = a.id();
  return a.tape().push(-a.value(), "neg", {a}, [ia](Tape& t, const Matrix& g) { t.accumulate(ia, -g); });
}

Var scale(const Var& a, double s) {
  const int ia = a.id();
  return a.tape().push(a.value() * s, "scale", {a}, [ia, s](Tape& t, const Matrix& g) { t.accumulate(ia, g * s); });
}

Var add_scalar(const Var& a, double s) {
  const int ia = a.id();
  return a.tape().push(ad::add_scalar(a.value(), s), "add_scalar", {a},
                       [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}

Var exp(const Var& a) {
  return unary(a, "exp", [](const Matrix& x) { return ad::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, "log", [](const Matrix& x) { return ad::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sigmoid(const Var& a) {
  return unary(a, "sigmoid", [](const Matrix& x) { return ad::sigmoid(x); },
               [](double, double y) { return y * (1.0 - y); });
}

Var log_sigmoid(const Var& a) {
  return unary(a, "log_sigmoid", [](const Matrix& x) { return ad::log_sigmoid(x); },
               [](double x, double) { return ad::sigmoid(-x); });
}

Var tanh(const Var& a) {
  return unary(a, "tanh", [](const Matrix& x) { return ad::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var elu(const Var& a) {
  return unary(a, "elu", [](const Matrix& x) { return ad::elu(x); },
               [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

Var square(const Var& a) {
  return unary(a, "square", [](const Matrix& x) { return ad::square(x); },
               [](double x, double) { return 2.0 * x; });
}

Var log1mexp(const Var& a) {
  // d/dx log(1 - e^x) = -1 / (e^{-x} - 1)
  return unary(a, "log1mexp", [](const Matrix& x) { return ad::log1mexp(x); },
               [](double x, double) { return -1.0 / std::expm1(-x); });
}

Var normal_cdf(const Var& a) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return unary(a, "normal_cdf", [](const Matrix& x) { return ad::normal_cdf(x); },
               [](double x, double) { return inv_sqrt_2pi * std::exp(-0.5 * x * x); });
}

Var logaddexp(const Var& a, const Var& b) {
  const int ia = a.id(), ib = b.id();
  const int iy = static_cast<int>(a.tape().size());
  return a.tape().push(ad::logaddexp(a.value(), b.value()), "logaddexp", {a, b},
                       [ia, ib, iy](Tape& t, const Matrix& g) {
                         const Matrix& y = t.value_of(iy);
                         t.accumulate(ia, (g.array() * (t.value_of(ia) - y).array().exp()).matrix());
                         t.accumulate(ib, (g.array() * (t.value_of(ib) - y).array().exp()).matrix());
                       });
}

Var clamp_max(const Var& a, double limit) {
  return unary(a, "clamp_max", [limit](const Matrix& x) { return ad::clamp_max(x, limit); },
               [limit](double x, double) { return x < limit ? 1.0 : 0.0; });
}

Var add_row(const Var& a, const Var& row) {
  const int ia = a.id(), ir = row.id();
  return a.tape().push(ad::add_row(a.value(), row.value()), "add_row", {a, row},
                       [ia, ir](Tape& t, const Matrix& g) {
                         t.accumulate(ia, g);
                         if (t.requires_grad(ir)) t.accumulate(ir, Matrix(g.colwise().sum()));
                       });
}

Var mul_row(const Var& a, const Var& row) {
  const int ia = a.id(), ir = row.id();
  return a.tape().push(ad::mul_row(a.value(), row.value()), "mul_row", {a, row},
                       [ia, ir](Tape& t, const Matrix& g) {
                         if (t.requires_grad(ia)) t.accumulate(ia, ad::mul_row(g, t.value_of(ir)));
                         if (t.requires_grad(ir))
                           t.accumulate(ir, Matrix(g.cwiseProduct(t.value_of(ia)).colwise().sum()));
                       });
}

Var mul_col(const Var& a, const Var& col) {
  const int ia = a.id(), ic = col.id();
  return a.tape().push(ad::mul_col(a.value(), col.value()), "mul_col", {a, col},
                       [ia, ic](Tape& t, const Matrix& g) {
                         if (t.requires_grad(ia)) t.accumulate(ia, ad::mul_col(g, t.value_of(ic)));
                         if (t.requires_grad(ic))
                           t.accumulate(ic, Matrix(g.cwiseProduct(t.value_of(ia)).rowwise().sum()));
                       });
}

Var matmul(const Var& a, const Var& b) {
  const int ia = a.id(), ib = b.id();
  return a.tape().push(ad::matmul(a.value(), b.value()), "matmul", {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) {
      Matrix ga(g.rows(), t.value_of(ib).rows());
      ga.noalias() = g * t.value_of(ib).transpose();
      t.accumulate(ia, ga);
    }
    if (t.requires_grad(ib)) {
      Matrix gb(t.value_of(ia).cols(), g.cols());
      gb.noalias() = t.value_of(ia).transpose() * g;
      t.accumulate(ib, gb);
    }
  });
}

Var sum(const Var& a) {
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape().push(ad::sum(a.value()), "sum", {a}, [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var rowsum(const Var& a) {
  const int ia = a.id();
  const Index c = a.cols();
  return a.tape().push(ad::rowsum(a.value()), "rowsum", {a}, [ia, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(g.col(0).replicate(1, c)));
  });
}

Var colsum(const Var& a) {
  const int ia = a.id();
  const Index r = a.rows();
  return a.tape().push(ad::colsum(a.value()), "colsum", {a}, [ia, r](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix(g.row(0).replicate(r, 1)));
  });
}

Var gather_rows(const Var& a, const IndexList& idx) {
  const int ia = a.id();
  const Index rows = a.rows();
  return a.tape().push(ad::gather_rows(a.value(), idx), "gather_rows", {a},
                       [ia, idx, rows](Tape& t, const Matrix& g) {
                         t.accumulate(ia, ad::segment_sum(g, idx, rows));
                       });
}

Var segment_sum(const Var& a, const IndexList& seg, Index segments) {
  const int ia = a.id();
  return a.tape().push(ad::segment_sum(a.value(), seg, segments), "segment_sum", {a},
                       [ia, seg](Tape& t, const Matrix& g) { t.accumulate(ia, ad::gather_rows(g, seg)); });
}

Var concat_cols(const Var& a, const Var& b) {
  const int ia = a.id(), ib = b.id();
  const Index ca = a.cols(), cb = b.cols();
  return a.tape().push(ad::concat_cols(a.value(), b.value()), "concat_cols", {a, b},
                       [ia, ib, ca, cb](Tape& t, const Matrix& g) {
                         if (t.requires_grad(ia)) t.accumulate(ia, Matrix(g.leftCols(ca)));
                         if (t.requires_grad(ib)) t.accumulate(ib, Matrix(g.rightCols(cb)));
                       });
}

Var slice_cols(const Var& a, Index start, Index count) {
  const int ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  return a.tape().push(ad::slice_cols(a.value(), start, count), "slice_cols", {a},
                       [ia, rows, cols, start, count](Tape& t, const Matrix& g) {
                         Matrix full = Matrix::Zero(rows, cols);
                         full.middleCols(start, count) = g;
                         t.accumulate(ia, full);
                       });
}

Var transpose(const Var& a) {
  const int ia = a.id();
  return a.tape().push(ad::transpose(a.value()), "transpose", {a},
                       [ia](Tape& t, const Matrix& g) { t.accumulate(ia, Matrix(g.transpose())); });
}

}  // namespace vibo::ad
