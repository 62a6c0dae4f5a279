#pragma once

#include "vibo/irt_models.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace vibo {

using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct GroundTruth {
  ModelSpec spec;
  Matrix abilities;  // N x K
  Matrix items;      // M x P, unconstrained layout of `spec`
};

// N x M responses. Unobserved cells hold 0 and carry no information.
class ResponseDataset {
 public:
  ResponseDataset() = default;
  ResponseDataset(Matrix values, Mask mask, ResponseMode mode);

  Index persons() const { return values_.rows(); }
  Index items() const { return values_.cols(); }
  ResponseMode mode() const { return mode_; }
  const Matrix& values() const { return values_; }
  const Mask& mask() const { return mask_; }
  bool observed(Index i, Index j) const { return mask_(i, j) != 0; }
  double value(Index i, Index j) const { return values_(i, j); }
  Index observed_count() const;

  // Observed item indices of person i, ascending.
  IndexList observed_items(Index i) const;

  // Same data with cells whose `hidden` flag is set marked missing.
  ResponseDataset without(const Mask& hidden) const;
  // Observed cells rounded to {0, 1}.
  ResponseDataset binarized() const;

  std::vector<std::string> person_ids;
  std::vector<std::string> item_ids;
  std::optional<GroundTruth> truth;

  void validate() const;

 private:
  Matrix values_;
  Mask mask_;
  ResponseMode mode_ = ResponseMode::Binary;
};

struct SimulateOptions {
  Family family = Family::TwoPL;
  Index N = 100;
  Index M = 10;
  Index K = 1;
  double missing_frac = 0.0;
  std::uint64_t seed = 0;
  ResponseMode mode = ResponseMode::Binary;
  // Replaces the sampled item table (M x P) when set.
  std::optional<Matrix> fixed_items;
};

// Abilities and unconstrained item parameters ~ N(0, I); responses drawn from
// the model (Bernoulli, or truncated Normal in continuous mode).
ResponseDataset simulate(const SimulateOptions& opts);

ResponseDataset read_csv(const std::filesystem::path& path);
ResponseDataset parse_csv(const std::string& text);
void write_csv(const ResponseDataset& data, const std::filesystem::path& path);
std::string format_csv(const ResponseDataset& data);

// `<stem>.abilities.csv` and `<stem>.items.csv` next to `path`.
void write_ground_truth(const ResponseDataset& data, const std::filesystem::path& path);
// Family and K are recovered from the item file.
std::optional<GroundTruth> read_ground_truth(const std::filesystem::path& path);

// Draw from Normal(mean, sigma^2) truncated to [0, 1].
double sample_truncated_normal(double mean, double sigma, Rng& rng);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace vibo
