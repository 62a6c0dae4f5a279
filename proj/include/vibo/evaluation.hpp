#pragma once

#include "vibo/baselines.hpp"
#include "vibo/vibo_engine.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <utility>
#include <vector>

namespace vibo {

struct HoldoutSplit {
  std::vector<std::pair<Index, Index>> cells;  // (person, item), sorted
  Mask hidden;
  double fraction = 0.1;
  std::uint64_t seed = 0;

  // The dataset with held-out cells marked missing.
  ResponseDataset training_view(const ResponseDataset& data) const { return data.without(hidden); }
};

// round(fraction * observed) observed cells, uniformly without replacement.
HoldoutSplit make_holdout(const ResponseDataset& data, double fraction = 0.1, std::uint64_t seed = 0);

// Fraction of held-out cells where (p >= 0.5) matches the response. In
// continuous mode both the response and the prediction are rounded.
double impute_accuracy(const std::vector<double>& probs, const ResponseDataset& data, const HoldoutSplit& split);
double impute_accuracy(const GenerativeModel& model, const PointEstimates& est, const ResponseDataset& data,
                       const HoldoutSplit& split);
// Posterior means are computed from the training view only.
double impute_accuracy(const ViboModel& model, const ResponseDataset& data, const HoldoutSplit& split,
                       int samples = 100, std::uint64_t seed = 0);

// p(r = 1) at the listed cells under point estimates.
std::vector<double> predict_cells(const GenerativeModel& model, const PointEstimates& est,
                                  const std::vector<std::pair<Index, Index>>& cells);

struct PosteriorSummary {
  Matrix ability_mu, ability_var;  // N x K
  Matrix item_mu, item_var;        // M x P
};

// Without flows: item Gaussians, and the ability Gaussian with items fixed at
// their means. With flows: Monte Carlo moments from `samples` joint draws.
PosteriorSummary posterior_summary(const ViboModel& model, const ResponseDataset& data, int samples = 100,
                                   std::uint64_t seed = 0);
PointEstimates posterior_means(const ViboModel& model, const ResponseDataset& data, int samples = 100,
                               std::uint64_t seed = 0);

// Per-dimension Pearson correlation.
Vector correlation_per_dim(const Matrix& inferred, const Matrix& truth);
// Mean of correlation_per_dim.
double recovery_correlation(const Matrix& inferred, const Matrix& truth);
// Mean of |correlation| per dimension; blind to the reflection a -> -a, k -> -k.
double aligned_recovery_correlation(const Matrix& inferred, const Matrix& truth);

struct LogMarginal {
  double total = 0.0;
  Vector per_person;
};

// Importance-sampled log p(r_i) summed over persons, using joint samples from q.
LogMarginal log_marginal(const ViboModel& model, const ResponseDataset& data, int samples = 1000,
                         std::uint64_t seed = 0);

struct PredictiveStats {
  Vector person_means;  // mean simulated response per person over observed cells
  Vector item_means;    // mean simulated response per item over observed cells
};

PredictiveStats posterior_predictive_stats(const ViboModel& model, const ResponseDataset& data, int samples,
                                           std::uint64_t seed);

struct Metrics {
  std::optional<double> accuracy;
  std::optional<Vector> correlation_per_dim;
  std::optional<double> item_correlation;
  std::optional<double> log_marginal;
  std::optional<double> wall_clock_sec;
  std::optional<PredictiveStats> predictive;
};

// Flat JSON object; absent metrics are omitted.
nlohmann::json metrics_json(const Metrics& m);

}  // namespace vibo
