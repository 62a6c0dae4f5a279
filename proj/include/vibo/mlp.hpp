#pragma once

#include "vibo/context.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace vibo {

enum class OutputActivation { Identity, Sigmoid };

// Dense ELU network. Weights live in a ParamStore under `<prefix>.W<l>` (in x out)
// and `<prefix>.b<l>` (1 x out); the Mlp itself only describes the shape.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string prefix, std::vector<Index> widths, OutputActivation output = OutputActivation::Identity);

  // Hidden stack of `layers` ELU layers of `width` units between in and out.
  static Mlp with_hidden(std::string prefix, Index in, Index width, Index layers, Index out,
                         OutputActivation output = OutputActivation::Identity);

  // Glorot-uniform weights, zero biases.
  void initialize(ParamStore& store, Rng& rng) const;
  // Zeroes the final affine layer so the network starts as the constant 0.
  void zero_output_layer(ParamStore& store) const;

  template <class Ctx>
  typename Ctx::Value forward(Ctx& ctx, const ParamStore& store, const typename Ctx::Value& x) const;

  // Single-input convenience over the plain path.
  Vector forward(const ParamStore& store, const Vector& input) const;

  const std::vector<Index>& widths() const { return widths_; }
  Index input_width() const { return widths_.front(); }
  Index output_width() const { return widths_.back(); }
  std::size_t layer_count() const { return widths_.size() - 1; }
  OutputActivation output_activation() const { return output_; }
  const std::string& prefix() const { return prefix_; }

  std::string weight_name(std::size_t layer) const;
  std::string bias_name(std::size_t layer) const;

  nlohmann::json describe() const;

 private:
  std::string prefix_;
  std::vector<Index> widths_;
  OutputActivation output_ = OutputActivation::Identity;
};

template <class Ctx>
typename Ctx::Value Mlp::forward(Ctx& ctx, const ParamStore& store, const typename Ctx::Value& x) const {
  if (x.cols() != input_width())
    throw DimensionError("mlp '" + prefix_ + "' expects " + std::to_string(input_width()) + " inputs, got " +
                         std::to_string(x.cols()));
  typename Ctx::Value h = x;
  for (std::size_t l = 0; l < layer_count(); ++l) {
    h = ad::add_row(ad::matmul(h, ctx.param(store, weight_name(l))), ctx.param(store, bias_name(l)));
    if (l + 1 < layer_count()) h = ad::elu(h);
  }
  if (output_ == OutputActivation::Sigmoid) h = ad::sigmoid(h);
  return h;
}

}  // namespace vibo
