#pragma once

// Plain-value twins of the differentiable ops in tape.hpp. Semantics match
// one-to-one so templated model code evaluates identically on either path.

#include "vibo/common.hpp"

namespace vibo::ad {

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix mul(const Matrix& a, const Matrix& b);
Matrix div(const Matrix& a, const Matrix& b);
Matrix neg(const Matrix& a);
Matrix scale(const Matrix& a, double s);
Matrix add_scalar(const Matrix& a, double s);
Matrix exp(const Matrix& a);
Matrix log(const Matrix& a);
Matrix sigmoid(const Matrix& a);
Matrix log_sigmoid(const Matrix& a);
Matrix tanh(const Matrix& a);
Matrix elu(const Matrix& a);
Matrix square(const Matrix& a);
Matrix log1mexp(const Matrix& a);
Matrix normal_cdf(const Matrix& a);
Matrix logaddexp(const Matrix& a, const Matrix& b);
Matrix clamp_max(const Matrix& a, double limit);

Matrix add_row(const Matrix& a, const Matrix& row);
Matrix mul_row(const Matrix& a, const Matrix& row);
Matrix mul_col(const Matrix& a, const Matrix& col);

Matrix matmul(const Matrix& a, const Matrix& b);

Matrix sum(const Matrix& a);
Matrix rowsum(const Matrix& a);
Matrix colsum(const Matrix& a);

Matrix gather_rows(const Matrix& a, const IndexList& idx);
Matrix segment_sum(const Matrix& a, const IndexList& seg, Index segments);

Matrix concat_cols(const Matrix& a, const Matrix& b);
Matrix slice_cols(const Matrix& a, Index start, Index count);
Matrix transpose(const Matrix& a);

// Scalar kernels shared by both paths.
double sigmoid(double x);
double log_sigmoid(double x);
double elu(double x);
double log1mexp(double x);
double normal_cdf(double x);
double logaddexp(double a, double b);

}  // namespace vibo::ad
