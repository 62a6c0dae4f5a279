#pragma once

#include "vibo/mlp.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace vibo {

struct DiagGaussian {
  Vector mu;
  Vector log_var;

  DiagGaussian() = default;
  DiagGaussian(Vector m, Vector lv);
  static DiagGaussian standard(Index dim);

  Index dim() const { return mu.size(); }
  Vector var() const { return log_var.array().exp(); }
  void validate() const;
};

// Precision-weighted product of the given experts; no implicit prior.
DiagGaussian fuse_product(const std::vector<DiagGaussian>& experts);
// Gaussian with the mean and variance of the equal-weight mixture.
DiagGaussian fuse_mean(const std::vector<DiagGaussian>& components);
Vector reparam_sample(const DiagGaussian& q, const Vector& eps);
double kl_diag_gaussians(const DiagGaussian& q, const DiagGaussian& p);
double log_density(const DiagGaussian& q, const Vector& x);

template <class V>
struct GaussianRows {
  V mu;       // R x D
  V log_var;  // R x D
};

// Row-wise helpers; every result is R x 1 unless noted.
template <class Ctx>
typename Ctx::Value kl_to_standard_normal(Ctx& ctx, const typename Ctx::Value& mu, const typename Ctx::Value& log_var);
template <class Ctx>
typename Ctx::Value gaussian_logpdf(Ctx& ctx, const typename Ctx::Value& x, const typename Ctx::Value& mu,
                                    const typename Ctx::Value& log_var);
template <class Ctx>
typename Ctx::Value standard_normal_logpdf(Ctx& ctx, const typename Ctx::Value& x);
template <class Ctx>
typename Ctx::Value reparameterize(Ctx& ctx, const GaussianRows<typename Ctx::Value>& q, const Matrix& eps);

// Fuses expert rows grouped by `segment` into `segments` Gaussians. The prior
// (1 x D rows) enters each product exactly once.
template <class Ctx>
GaussianRows<typename Ctx::Value> product_of_experts(Ctx& ctx, const GaussianRows<typename Ctx::Value>& experts,
                                                     const IndexList& segment, Index segments,
                                                     const DiagGaussian& prior);

// Moment-matched mixture over `components` per segment; slots not covered by an
// expert row are filled with the prior.
template <class Ctx>
GaussianRows<typename Ctx::Value> mean_of_experts(Ctx& ctx, const GaussianRows<typename Ctx::Value>& experts,
                                                  const IndexList& segment, Index segments, Index components,
                                                  const DiagGaussian& prior);

// Shared MLP from (item sample, response) to one Gaussian expert over the
// ability. Without item input the expert depends on the response alone.
class AbilityEncoder {
 public:
  AbilityEncoder() = default;
  AbilityEncoder(std::string prefix, Index item_dim, Index K, bool uses_items, Index width, Index layers);

  void initialize(ParamStore& phi, Rng& rng) const { net_.initialize(phi, rng); }

  // items: R x P (ignored without item input); responses: R x 1.
  template <class Ctx>
  GaussianRows<typename Ctx::Value> experts(Ctx& ctx, const ParamStore& phi, const typename Ctx::Value& items,
                                            const Matrix& responses) const;

  Index K() const { return K_; }
  Index item_dim() const { return item_dim_; }
  bool uses_items() const { return uses_items_; }
  const Mlp& net() const { return net_; }

 private:
  Mlp net_;
  Index item_dim_ = 0;
  Index K_ = 0;
  bool uses_items_ = true;
};

// Product-of-experts ability posterior for one person. `items` is M x P.
DiagGaussian encode_ability(const AbilityEncoder& enc, const ParamStore& phi, const Matrix& items,
                            const Vector& responses, const std::vector<bool>& observed, const DiagGaussian& prior);
DiagGaussian encode_ability_mean(const AbilityEncoder& enc, const ParamStore& phi, const Matrix& items,
                                 const Vector& responses, const std::vector<bool>& observed,
                                 const DiagGaussian& prior);

// Row-per-entity Gaussian table stored as `<prefix>.mu` / `<prefix>.log_var`.
class GaussianTable {
 public:
  GaussianTable() = default;
  GaussianTable(std::string prefix, Index rows, Index dim);

  // mu = 0, log_var = 0.
  void initialize(ParamStore& phi) const;

  template <class Ctx>
  GaussianRows<typename Ctx::Value> rows(Ctx& ctx, const ParamStore& phi) const {
    return {ctx.param(phi, mu_name()), ctx.param(phi, log_var_name())};
  }
  DiagGaussian row(const ParamStore& phi, Index r) const;

  std::string mu_name() const { return prefix_ + ".mu"; }
  std::string log_var_name() const { return prefix_ + ".log_var"; }
  Index size() const { return rows_; }
  Index dim() const { return dim_; }

 private:
  std::string prefix_;
  Index rows_ = 0;
  Index dim_ = 0;
};

// Planar flows z <- z + u_hat * tanh(w^T z + b), applied in order. One flow
// vector is a block of `block_rows` x `dim` entries: u and w have that shape
// and a (G * block_rows) x dim input holds G vectors as consecutive blocks.
class PlanarFlowStack {
 public:
  PlanarFlowStack() = default;
  PlanarFlowStack(std::string prefix, Index dim, int count, Index block_rows = 1);

  // u, w ~ N(0, 0.1^2); b = 0.
  void initialize(ParamStore& phi, Rng& rng) const;

  // Returns (z_K, log|det| per block as a G x 1 column).
  template <class Ctx>
  std::pair<typename Ctx::Value, typename Ctx::Value> push(Ctx& ctx, const ParamStore& phi,
                                                           const typename Ctx::Value& z) const;

  // One row-major flattened block. Returns (z_K, base_logdensity - sum log|det|).
  std::pair<Vector, double> push(const ParamStore& phi, const Vector& z0, double base_logdensity) const;
  // Inverts the stack numerically.
  Vector invert(const ParamStore& phi, const Vector& zK) const;

  // The reprojected u of flow k, flattened, guaranteeing w^T u_hat >= -1.
  Vector u_hat(const ParamStore& phi, int k) const;

  int count() const { return count_; }
  Index dim() const { return dim_; }
  Index block_rows() const { return rows_; }
  std::string u_name(int k) const { return prefix_ + ".u" + std::to_string(k); }
  std::string w_name(int k) const { return prefix_ + ".w" + std::to_string(k); }
  std::string b_name(int k) const { return prefix_ + ".b" + std::to_string(k); }

 private:
  std::string prefix_;
  Index dim_ = 0;
  Index rows_ = 1;
  int count_ = 0;
};

// `<id_header>,mu_1..mu_D,var_1..var_D`; var columns blank when absent.
std::string gaussian_table_csv(const std::string& id_header, const std::vector<std::string>& ids, const Matrix& mu,
                               const std::optional<Matrix>& var);

}  // namespace vibo
