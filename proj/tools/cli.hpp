#pragma once

#include "vibo/baselines.hpp"
#include "vibo/evaluation.hpp"
#include "vibo/vibo_engine.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace vibo::cli {

enum class Algorithm { Vibo, Jmle, Em };

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);

struct SimulateSection {
  Family family = Family::TwoPL;
  Index N = 100;
  Index M = 10;
  Index K = 1;
  double missing_frac = 0.0;
  ResponseMode mode = ResponseMode::Binary;
  std::string out;  // empty: <out_dir>/data.csv
};

struct ModelSection {
  Family family = Family::TwoPL;
  Index K = 1;
  std::optional<ResponseMode> mode;  // unset: taken from the data
  Index hidden_width = 64;
  Index hidden_layers = 3;
};

struct HoldoutSection {
  double fraction = 0.1;
  std::optional<std::uint64_t> seed;  // unset: the run seed
};

struct EvalSection {
  std::vector<std::string> metrics{"log_marginal", "ppc", "correlation"};
  int log_marginal_samples = 1000;
  int ppc_samples = 100;
  // Monte Carlo draws for posterior means when flows are on.
  int mean_samples = 100;
};

struct IccSection {
  std::vector<std::string> items;       // empty: every item
  std::optional<std::vector<double>> params;  // explicit unconstrained item row
  double min = -5.0;
  double max = 5.0;
  Index points = 101;
  std::string out;  // empty: <out_dir>/icc.csv
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  int threads = 1;
  std::string data;
  std::string checkpoint;  // empty: <out_dir>/checkpoint.json
  Algorithm algorithm = Algorithm::Vibo;
  ModelSection model;
  ViboConfig vibo;
  JmleConfig jmle;
  EmConfig em;
  SimulateSection simulate;
  std::optional<HoldoutSection> holdout;
  EvalSection eval;
  IccSection icc;

  // Unknown keys and ill-typed values raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  std::string checkpoint_path() const;
  std::uint64_t holdout_seed() const { return holdout && holdout->seed ? *holdout->seed : seed; }
};

// Machine-readable error document.
nlohmann::json error_json(const std::exception& e);

// Parses argv, runs one subcommand, writes its JSON result to `out` and any
// error JSON to `err`. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace vibo::cli
