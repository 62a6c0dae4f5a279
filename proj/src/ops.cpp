#include "vibo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace vibo::ad {

namespace {

void same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

template <class F>
Matrix map(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.size(); ++i) out.data()[i] = f(a.data()[i]);
  return out;
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); }

double elu(double x) { return x > 0.0 ? x : std::expm1(x); }

double log1mexp(double x) {
  // Maechler's split keeps full relative precision on both sides of -ln 2.
  if (x > -0.6931471805599453) return std::log(-std::expm1(x));
  return std::log1p(-std::exp(x));
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double logaddexp(double a, double b) {
  const double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

Matrix add(const Matrix& a, const Matrix& b) {
  same_shape(a, b, "add");
  return a + b;
}
Matrix sub(const Matrix& a, const Matrix& b) {
  same_shape(a, b, "sub");
  return a - b;
}
Matrix mul(const Matrix& a, const Matrix& b) {
  same_shape(a, b, "mul");
  return a.cwiseProduct(b);
}
Matrix div(const Matrix& a, const Matrix& b) {
  same_shape(a, b, "div");
  return a.cwiseQuotient(b);
}
Matrix neg(const Matrix& a) { return -a; }
Matrix scale(const Matrix& a, double s) { return a * s; }
Matrix add_scalar(const Matrix& a, double s) { return (a.array() + s).matrix(); }
Matrix exp(const Matrix& a) { return a.array().exp().matrix(); }
Matrix log(const Matrix& a) { return a.array().log().matrix(); }
Matrix sigmoid(const Matrix& a) { return map(a, [](double x) { return sigmoid(x); }); }
Matrix log_sigmoid(const Matrix& a) { return map(a, [](double x) { return log_sigmoid(x); }); }
Matrix tanh(const Matrix& a) { return a.array().tanh().matrix(); }
Matrix elu(const Matrix& a) { return map(a, [](double x) { return elu(x); }); }
Matrix square(const Matrix& a) { return a.array().square().matrix(); }
Matrix log1mexp(const Matrix& a) { return map(a, [](double x) { return log1mexp(x); }); }
Matrix normal_cdf(const Matrix& a) { return map(a, [](double x) { return normal_cdf(x); }); }
Matrix logaddexp(const Matrix& a, const Matrix& b) {
  same_shape(a, b, "logaddexp");
  Matrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.size(); ++i) out.data()[i] = logaddexp(a.data()[i], b.data()[i]);
  return out;
}
Matrix clamp_max(const Matrix& a, double limit) { return a.cwiseMin(limit); }

Matrix add_row(const Matrix& a, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: row shape mismatch");
  Matrix out = a;
  out.rowwise() += row.row(0);
  return out;
}

Matrix mul_row(const Matrix& a, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("mul_row: row shape mismatch");
  Matrix out = a;
  out.array().rowwise() *= row.array().row(0);
  return out;
}

Matrix mul_col(const Matrix& a, const Matrix& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw DimensionError("mul_col: column shape mismatch");
  Matrix out = a;
  out.array().colwise() *= col.array().col(0);
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                         std::to_string(b.rows()) + " differ");
  Matrix out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

Matrix sum(const Matrix& a) {
  Matrix out(1, 1);
  out(0, 0) = a.sum();
  return out;
}
Matrix rowsum(const Matrix& a) { return a.rowwise().sum(); }
Matrix colsum(const Matrix& a) { return a.colwise().sum(); }

Matrix gather_rows(const Matrix& a, const IndexList& idx) {
  Matrix out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= a.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Index>(r)) = a.row(idx[r]);
  }
  return out;
}

Matrix segment_sum(const Matrix& a, const IndexList& seg, Index segments) {
  if (static_cast<Index>(seg.size()) != a.rows()) throw DimensionError("segment_sum: segment list length");
  Matrix out = Matrix::Zero(segments, a.cols());
  for (std::size_t r = 0; r < seg.size(); ++r) {
    if (seg[r] < 0 || seg[r] >= segments) throw DimensionError("segment_sum: segment out of range");
    out.row(seg[r]) += a.row(static_cast<Index>(r));
  }
  return out;
}

Matrix concat_cols(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DimensionError("concat_cols: row count mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a;
  out.rightCols(b.cols()) = b;
  return out;
}

Matrix slice_cols(const Matrix& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw DimensionError("slice_cols: out of range");
  return a.middleCols(start, count);
}

Matrix transpose(const Matrix& a) { return a.transpose(); }

}  // namespace vibo::ad
