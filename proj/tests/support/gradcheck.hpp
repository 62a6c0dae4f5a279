#pragma once

#include "vibo/context.hpp"

#include <cmath>
#include <vector>

namespace vibo::testing {

// ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||) over every entry of `stores`,
// where f(ctx) is summed to a scalar. Central differences with step h.
template <class F>
double gradient_error(const std::vector<ParamStore*>& stores, F&& f, double h = 1e-5) {
  ad::Tape tape;
  TapeContext tctx(tape);
  const ad::Var root = ad::sum(f(tctx));
  tape.backward(root);
  std::vector<Gradient> tape_grads;
  for (ParamStore* s : stores) tape_grads.push_back(tape.gradient(*s));

  PlainContext pctx;
  auto eval = [&] { return f(pctx).sum(); };
  double diff2 = 0.0, tape2 = 0.0, fd2 = 0.0;
  for (std::size_t k = 0; k < stores.size(); ++k) {
    for (const auto& name : stores[k]->names()) {
      Matrix& v = stores[k]->mutable_value(name);
      const auto it = tape_grads[k].find(name);
      for (Index idx = 0; idx < v.size(); ++idx) {
        const double orig = v.data()[idx];
        v.data()[idx] = orig + h;
        const double fp = eval();
        v.data()[idx] = orig - h;
        const double fm = eval();
        v.data()[idx] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double g = it == tape_grads[k].end() ? 0.0 : it->second.data()[idx];
        diff2 += (g - fd) * (g - fd);
        tape2 += g * g;
        fd2 += fd * fd;
      }
    }
  }
  const double scale = std::sqrt(std::max(tape2, fd2));
  return scale == 0.0 ? 0.0 : std::sqrt(diff2) / scale;
}

// Central-difference Jacobian of a map R^n -> R^m.
template <class F>
Matrix numerical_jacobian(F&& f, const Vector& x, double h = 1e-6) {
  const Vector f0 = f(x);
  Matrix J(f0.size(), x.size());
  for (Index c = 0; c < x.size(); ++c) {
    Vector xp = x, xm = x;
    xp(c) += h;
    xm(c) -= h;
    J.col(c) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return J;
}

}  // namespace vibo::testing
