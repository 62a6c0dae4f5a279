#pragma once

#include "vibo/mlp.hpp"

#include <cmath>
#include <vector>

namespace vibo::testing {

// Plain-loop evaluation of an ELU network read straight from the store. It
// shares no code with Mlp::forward.
inline Vector hand_forward(const Mlp& net, const ParamStore& store, const Vector& x) {
  std::vector<double> h(x.data(), x.data() + x.size());
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    const Matrix& W = store.value(net.weight_name(l));
    const Matrix& b = store.value(net.bias_name(l));
    std::vector<double> next(static_cast<std::size_t>(W.cols()));
    for (Index o = 0; o < W.cols(); ++o) {
      double acc = b(0, o);
      for (Index i = 0; i < W.rows(); ++i) acc += h[static_cast<std::size_t>(i)] * W(i, o);
      if (l + 1 < net.layer_count()) acc = acc > 0.0 ? acc : std::expm1(acc);
      next[static_cast<std::size_t>(o)] = acc;
    }
    h = std::move(next);
  }
  Vector out(static_cast<Index>(h.size()));
  for (Index i = 0; i < out.size(); ++i) out(i) = h[static_cast<std::size_t>(i)];
  if (net.output_activation() == OutputActivation::Sigmoid)
    for (Index i = 0; i < out.size(); ++i) out(i) = 1.0 / (1.0 + std::exp(-out(i)));
  return out;
}

}  // namespace vibo::testing
