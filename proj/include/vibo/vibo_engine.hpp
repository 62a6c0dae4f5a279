#pragma once

#include "vibo/adam.hpp"
#include "vibo/dataio.hpp"
#include "vibo/posterior.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <vector>

namespace vibo {

enum class PosteriorMode { Product, Mean, Independent, Unamortized };

std::string to_string(PosteriorMode m);
PosteriorMode posterior_mode_from_string(const std::string& s);

struct ViboConfig {
  double beta = 0.5;
  int epochs = 100;
  Index batch_size = 16;
  double learning_rate = 5e-3;
  std::uint64_t seed = 0;
  PosteriorMode posterior_mode = PosteriorMode::Product;
  int flows = 0;
  // Noise draws averaged per person per step.
  int samples = 1;
  // One item-parameter draw per minibatch, shared by its persons.
  bool shared_item_sample = true;
  // Weight of the item-bank KL inside each person's objective; 1 / N when unset, so a minibatch sum
  // carries it at batch_size / N and an epoch counts it once.
  std::optional<double> item_kl_weight;
  // Starting log-variance of every item Gaussian; 0 matches the prior.
  double item_init_log_var = 0.0;
  Index encoder_width = 64;
  Index encoder_layers = 3;

  void validate() const;
  double resolved_item_kl_weight(Index N) const;
  nlohmann::json to_json() const;
  static ViboConfig from_json(const nlohmann::json& j);
};

// phi: item Gaussians, the ability encoder (or per-person table) and flows.
class VariationalPosterior {
 public:
  VariationalPosterior() = default;
  VariationalPosterior(const ModelSpec& spec, const ViboConfig& cfg, Index N, Index M, Rng& rng);

  ParamStore& phi() { return phi_; }
  const ParamStore& phi() const { return phi_; }

  PosteriorMode mode() const { return mode_; }
  int flow_count() const { return flows_; }
  Index persons() const { return N_; }
  Index items() const { return M_; }
  Index K() const { return K_; }
  Index P() const { return P_; }

  const GaussianTable& item_table() const { return items_; }
  const GaussianTable& ability_table() const { return abilities_; }
  const AbilityEncoder& encoder() const { return encoder_; }
  const PlanarFlowStack& item_flows() const { return item_flows_; }
  const PlanarFlowStack& ability_flows() const { return ability_flows_; }

  nlohmann::json to_json() const;
  static VariationalPosterior from_json(const nlohmann::json& j);

 private:
  void build(Index width, Index layers);

  ParamStore phi_;
  PosteriorMode mode_ = PosteriorMode::Product;
  int flows_ = 0;
  Index N_ = 0, M_ = 0, K_ = 1, P_ = 1;
  Index width_ = 64, layers_ = 3;
  GaussianTable items_;
  GaussianTable abilities_;
  AbilityEncoder encoder_;
  PlanarFlowStack item_flows_;
  PlanarFlowStack ability_flows_;
};

struct ViboModel {
  GenerativeModel generative;
  VariationalPosterior posterior;

  nlohmann::json to_json() const;
  static ViboModel from_json(const nlohmann::json& j);
};

// Standard-normal noise for one evaluation of B persons. item_eps has either
// B*M rows (row b*M + j drives person b's sample of item j) or M rows shared
// by every person.
struct ViboNoise {
  Matrix item_eps;     // (B*M) x P or M x P
  Matrix ability_eps;  // B x K
};

ViboNoise draw_noise(Rng& rng, Index B, Index M, Index P, Index K, bool shared_items = false);

// ClosedForm uses analytic Gaussian KLs (flows require SingleSample).
// SingleSample uses log q - log p at the drawn sample, so total = log w.
enum class KlEstimator { ClosedForm, SingleSample };

struct ViboOptions {
  double beta = 1.0;
  double item_kl_weight = 1.0;
  KlEstimator kl = KlEstimator::ClosedForm;
};

template <class V>
struct ViboRows {
  V total;       // B x 1
  V recon;       // B x 1
  V kl_ability;  // B x 1
  V kl_item;     // B x 1, unweighted
  V abilities;   // B x K sample
  V ability_mu;       // B x K, Gaussian stage before any flow
  V ability_log_var;  // B x K
  V items;       // item_eps-shaped sample; unset under the closed-form estimator
};

template <class Ctx>
ViboRows<typename Ctx::Value> vibo_rows(Ctx& ctx, const ViboModel& model, const ResponseDataset& data,
                                        const IndexList& persons, const ViboNoise& noise, const ViboOptions& opt);

struct ViboTerms {
  double total = 0.0;
  double recon = 0.0;
  double kl_ability = 0.0;
  double kl_item = 0.0;
};

// Single-sample objective for one person.
ViboTerms vibo_value(const ViboModel& model, const ResponseDataset& data, Index person, Rng& rng, double beta,
                     double item_kl_weight = 1.0);

struct BatchGradient {
  double loss = 0.0;  // -mean total
  ViboTerms mean;
  Gradient theta;
  Gradient phi;
};

// Gradient of -mean(total) over `persons`, one entry of `noise` per sample.
BatchGradient batch_gradient(const ViboModel& model, const ResponseDataset& data, const IndexList& persons,
                             const std::vector<ViboNoise>& noise, const ViboOptions& opt);

struct EpochTrace {
  int epoch = 0;
  double vibo = 0.0;
  double recon = 0.0;
  double kl_ability = 0.0;
  double kl_item = 0.0;
  double seconds = 0.0;
};

struct FitResult {
  ViboModel model;
  ViboConfig config;
  std::vector<EpochTrace> trace;
  double wall_clock_seconds = 0.0;
};

FitResult fit(const ResponseDataset& data, const ModelSpec& spec, const ViboConfig& cfg);

nlohmann::json training_report(const FitResult& result);

}  // namespace vibo
