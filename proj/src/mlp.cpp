#include "vibo/mlp.hpp"

#include <cmath>

namespace vibo {

Mlp::Mlp(std::string prefix, std::vector<Index> widths, OutputActivation output)
    : prefix_(std::move(prefix)), widths_(std::move(widths)), output_(output) {
  if (widths_.size() < 2) throw ConfigError("mlp '" + prefix_ + "' needs at least an input and an output width");
  for (Index w : widths_)
    if (w <= 0) throw ConfigError("mlp '" + prefix_ + "' has a non-positive layer width");
}

Mlp Mlp::with_hidden(std::string prefix, Index in, Index width, Index layers, Index out, OutputActivation output) {
  std::vector<Index> widths{in};
  for (Index l = 0; l < layers; ++l) widths.push_back(width);
  widths.push_back(out);
  return Mlp(std::move(prefix), std::move(widths), output);
}

std::string Mlp::weight_name(std::size_t layer) const { return prefix_ + ".W" + std::to_string(layer); }

std::string Mlp::bias_name(std::size_t layer) const { return prefix_ + ".b" + std::to_string(layer); }

void Mlp::initialize(ParamStore& store, Rng& rng) const {
  for (std::size_t l = 0; l < layer_count(); ++l) {
    const Index fan_in = widths_[l];
    const Index fan_out = widths_[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> uniform(-limit, limit);
    Matrix w(fan_in, fan_out);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng);
    store.add(weight_name(l), std::move(w));
    store.add(bias_name(l), Matrix::Zero(1, fan_out));
  }
}

void Mlp::zero_output_layer(ParamStore& store) const {
  const std::size_t last = layer_count() - 1;
  store.mutable_value(weight_name(last)).setZero();
  store.mutable_value(bias_name(last)).setZero();
}

Vector Mlp::forward(const ParamStore& store, const Vector& input) const {
  PlainContext ctx;
  Matrix x = input.transpose();
  Matrix y = forward(ctx, store, x);
  return y.row(0).transpose();
}

nlohmann::json Mlp::describe() const {
  return {{"prefix", prefix_},
          {"widths", widths_},
          {"hidden_activation", "elu"},
          {"output_activation", output_ == OutputActivation::Sigmoid ? "sigmoid" : "identity"}};
}

}  // namespace vibo
