#pragma once

#include "vibo/mlp.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>

namespace vibo {

enum class Family { OnePL, TwoPL, ThreePL, MIRT, LPE, IDL, Link, Deep, Residual };
enum class ResponseMode { Binary, Continuous };

std::string to_string(Family f);
std::string to_string(ResponseMode m);
Family family_from_string(const std::string& s);
ResponseMode response_mode_from_string(const std::string& s);

// Standard deviation of the truncated Normal used for continuous responses.
inline constexpr double kContinuousSigma = 0.31622776601683794;  // sqrt(0.1)

// Largest log p(r = 1) fed to log1mexp; keeps log p(r = 0) finite.
inline constexpr double kLogProbCeiling = -1e-15;

// Positions inside an unconstrained item-parameter row.
struct ItemLayout {
  Index dim = 0;      // P
  Index k_offset = -1;
  Index k_count = 0;  // 0 when the family has no discrimination vector
  Index d_index = -1;
  Index g_index = -1;  // 3PL guessing logit
  Index b_index = -1;  // LPE log exponent
  Index e_offset = -1;  // Deep item embedding
};

struct ModelSpec {
  Family family = Family::TwoPL;
  Index K = 1;
  ResponseMode mode = ResponseMode::Binary;
  Index hidden_width = 64;
  Index hidden_layers = 3;

  ItemLayout layout() const;
  Index item_dim() const { return layout().dim; }
  bool uses_networks() const;
  void validate() const;

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

// Item parameters on their natural scale.
struct ItemParams {
  Vector k;                  // discrimination (1PL: ones)
  double d = 0.0;            // difficulty
  std::optional<double> g;   // 3PL guessing in [0, 1)
  std::optional<double> b;   // LPE exponent > 0
  Vector e;                  // Deep embedding

  static ItemParams from_unconstrained(const ModelSpec& spec, const Vector& row);
  Vector to_unconstrained(const ModelSpec& spec) const;
};

template <class V>
struct LogProbs {
  V log_p1;  // R x 1
  V log_p0;  // R x 1
};

// theta: the generative parameters. Analytic families own no tensors here;
// Link, Deep and Residual own their networks.
class GenerativeModel {
 public:
  GenerativeModel() = default;
  GenerativeModel(ModelSpec spec, Rng& rng);

  const ModelSpec& spec() const { return spec_; }
  ParamStore& theta() { return theta_; }
  const ParamStore& theta() const { return theta_; }

  // Row r pairs abilities.row(r) (R x K) with items.row(r) (R x P, unconstrained).
  template <class Ctx>
  LogProbs<typename Ctx::Value> log_probs(Ctx& ctx, const typename Ctx::Value& abilities,
                                          const typename Ctx::Value& items) const;

  // log p(r | a, d) per row; `responses` is R x 1 in {0, 1} or [0, 1].
  template <class Ctx>
  typename Ctx::Value log_likelihood(Ctx& ctx, const typename Ctx::Value& abilities,
                                     const typename Ctx::Value& items, const Matrix& responses) const;

  // Plain-path probabilities p(r = 1), R x 1.
  Matrix prob(const Matrix& abilities, const Matrix& items) const;

  const Mlp& link_net() const { return link_; }
  const Mlp& ability_net() const { return ability_net_; }
  const Mlp& item_net() const { return item_net_; }
  const Mlp& head_net() const { return head_; }

  nlohmann::json to_json() const;
  static GenerativeModel from_json(const nlohmann::json& j);

 private:
  template <class Ctx>
  typename Ctx::Value deep_logit(Ctx& ctx, const typename Ctx::Value& abilities,
                                 const typename Ctx::Value& item_input) const;
  void build_networks();

  ModelSpec spec_;
  ParamStore theta_;
  Mlp link_;
  Mlp ability_net_;
  Mlp item_net_;
  Mlp head_;
};

// Single-cell probability of a correct response.
double response_prob(const GenerativeModel& model, const Vector& ability, const ItemParams& item);

// Deep family: sigmoid(head(concat(ability_net(a), item_net(e)))).
double deep_response_prob(const GenerativeModel& model, const Vector& ability, const Vector& embedding);

// Log density of one observed response.
double response_loglik(const GenerativeModel& model, const Vector& ability, const ItemParams& item, double r);

// Log density of a continuous response r in [0, 1] given p = p(r = 1).
double truncated_normal_logpdf(double r, double p);

// item_id,family,d,k_1..k_K,g,b
std::string item_params_csv(const ModelSpec& spec, const Matrix& items, const std::vector<std::string>& item_ids);

}  // namespace vibo
