#pragma once

#include "vibo/param_store.hpp"

namespace vibo {

struct AdamOptions {
  double learning_rate = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One bias-corrected Adam update. Parameters absent from `grad` see a zero
// gradient. The store is left untouched if the update would go non-finite.
void adam_step(ParamStore& store, const Gradient& grad, const AdamOptions& options);

}  // namespace vibo
