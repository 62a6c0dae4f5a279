#include "vibo/adam.hpp"

#include <cmath>

namespace vibo {

void adam_step(ParamStore& store, const Gradient& grad, const AdamOptions& options) {
  if (!(options.learning_rate > 0.0)) throw ConfigError("Adam learning rate must be positive");
  for (const auto& [name, g] : grad) {
    const Matrix& v = store.value(name);
    if (g.rows() != v.rows() || g.cols() != v.cols())
      throw DimensionError("gradient shape mismatch for parameter '" + name + "'");
  }
  check_finite(grad);

  const std::int64_t t = store.iteration() + 1;
  const double bias1 = 1.0 - std::pow(options.beta1, static_cast<double>(t));
  const double bias2 = 1.0 - std::pow(options.beta2, static_cast<double>(t));

  struct Pending {
    ParamStore::Entry* entry;
    Matrix value, m, v;
  };
  std::vector<Pending> pending;
  pending.reserve(store.size());

  for (const auto& name : store.names()) {
    ParamStore::Entry& e = store.mutable_entry(name);
    auto it = grad.find(name);
    Pending p{&e, Matrix(), Matrix(), Matrix()};
    if (it == grad.end()) {
      p.m = options.beta1 * e.first_moment;
      p.v = options.beta2 * e.second_moment;
    } else {
      p.m = options.beta1 * e.first_moment + (1.0 - options.beta1) * it->second;
      p.v = options.beta2 * e.second_moment +
            (1.0 - options.beta2) * it->second.cwiseProduct(it->second);
    }
    const auto m_hat = p.m.array() / bias1;
    const auto v_hat = p.v.array() / bias2;
    p.value = e.value.array() - options.learning_rate * m_hat / (v_hat.sqrt() + options.epsilon);
    if (!p.value.allFinite()) throw NumericalError("Adam update produced non-finite values in '" + name + "'");
    pending.push_back(std::move(p));
  }

  for (auto& p : pending) {
    p.entry->value = std::move(p.value);
    p.entry->first_moment = std::move(p.m);
    p.entry->second_moment = std::move(p.v);
  }
  store.set_iteration(t);
}

}  // namespace vibo
