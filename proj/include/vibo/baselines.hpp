#pragma once

#include "vibo/adam.hpp"
#include "vibo/dataio.hpp"

#include <vector>

namespace vibo {

struct PointEstimates {
  Matrix abilities;  // N x K
  Matrix items;      // M x P, unconstrained
};

// Nodes (Q x K) and weights integrating against the standard normal density.
struct QuadratureRule {
  Matrix nodes;
  Vector weights;

  Index size() const { return weights.size(); }
  Index dim() const { return nodes.cols(); }
};

QuadratureRule gauss_hermite_normal(int n);
QuadratureRule tensor_product(const QuadratureRule& rule, Index K);
// Tensor-product rule for K <= 3.
QuadratureRule quadrature_rule(Index K, int nodes = 61);

struct JmleConfig {
  int epochs = 100;
  double learning_rate = 5e-3;
  Index batch_size = 16;
  std::uint64_t seed = 0;
  // Standard deviation of the random initial values.
  double init_scale = 0.1;
};

struct JmleResult {
  PointEstimates estimates;
  std::vector<double> trace;  // mean observed log-likelihood per person, per epoch
  double wall_clock_seconds = 0.0;
};

JmleResult fit_jmle(const ResponseDataset& data, const ModelSpec& spec, const JmleConfig& cfg);

struct EStep {
  Matrix cell_marginal;  // N x M, log p(r_ij | d_j); 0 where unobserved
  Matrix node_weights;   // N x Q posterior weights
  Vector person_marginal;  // N, log p(r_i)
  double marginal_loglik = 0.0;
};

EStep em_estep(const GenerativeModel& model, const Matrix& items, const QuadratureRule& rule,
               const ResponseDataset& data);

struct EmConfig {
  int max_iters = 500;
  double tol = 1e-5;
  int nodes = 61;
  double bound = 6.0;
  double newton_tol = 1e-8;
  int newton_cap = 100;
};

struct MStep {
  Matrix items;
  std::vector<bool> capped;        // some coordinate sits on the bound
  std::vector<bool> unconverged;   // solver hit its cap; previous value kept
  bool flagged(Index j) const {
    return capped[static_cast<std::size_t>(j)] || unconverged[static_cast<std::size_t>(j)];
  }
};

MStep em_mstep(const GenerativeModel& model, const ResponseDataset& data, const EStep& estep,
               const QuadratureRule& rule, const Matrix& items, const EmConfig& cfg);

struct EmResult {
  PointEstimates estimates;     // abilities are EAP means
  std::vector<double> trace;    // marginal log-likelihood before each M step
  std::vector<bool> flagged;
  int iterations = 0;
  bool converged = false;
  double wall_clock_seconds = 0.0;
};

// k = 1, d from each item's observed proportion correct.
Matrix em_initial_items(const ResponseDataset& data, const ModelSpec& spec);

EmResult em_fit(const ResponseDataset& data, const ModelSpec& spec, const EmConfig& cfg);

}  // namespace vibo
