#pragma once

// Evaluation contexts. Model code templated on a context runs either on plain
// matrices (PlainContext) or records onto a tape for gradients (TapeContext).

#include "vibo/ops.hpp"
#include "vibo/param_store.hpp"
#include "vibo/tape.hpp"

namespace vibo {

struct PlainContext {
  using Value = Matrix;

  Matrix param(const ParamStore& store, const std::string& name) const { return store.value(name); }
  Matrix constant(Matrix m) const { return m; }
  static const Matrix& value(const Matrix& v) { return v; }
};

struct TapeContext {
  using Value = ad::Var;

  explicit TapeContext(ad::Tape& t) : tape(t) {}

  ad::Var param(const ParamStore& store, const std::string& name) { return tape.parameter(store, name); }
  ad::Var constant(Matrix m) { return tape.constant(std::move(m)); }
  static const Matrix& value(const ad::Var& v) { return v.value(); }

  ad::Tape& tape;
};

}  // namespace vibo
