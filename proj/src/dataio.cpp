#include "vibo/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace vibo {

namespace fs = std::filesystem;

ResponseDataset::ResponseDataset(Matrix values, Mask mask, ResponseMode mode)
    : values_(std::move(values)), mask_(std::move(mask)), mode_(mode) {
  if (values_.rows() != mask_.rows() || values_.cols() != mask_.cols())
    throw DimensionError("values and mask must have the same shape");
  for (Index i = 0; i < values_.rows(); ++i)
    for (Index j = 0; j < values_.cols(); ++j)
      if (!mask_(i, j)) values_(i, j) = 0.0;
  validate();
}

void ResponseDataset::validate() const {
  for (Index i = 0; i < values_.rows(); ++i)
    for (Index j = 0; j < values_.cols(); ++j) {
      if (!mask_(i, j)) continue;
      const double v = values_(i, j);
      const bool ok = mode_ == ResponseMode::Binary ? (v == 0.0 || v == 1.0) : (v >= 0.0 && v <= 1.0);
      if (!ok)
        throw DomainError("response (" + std::to_string(i) + ", " + std::to_string(j) + ") = " + std::to_string(v) +
                          " is outside the " + to_string(mode_) + " domain");
    }
  if (!person_ids.empty() && static_cast<Index>(person_ids.size()) != persons())
    throw DimensionError("person id count does not match N");
  if (!item_ids.empty() && static_cast<Index>(item_ids.size()) != items())
    throw DimensionError("item id count does not match M");
}

Index ResponseDataset::observed_count() const { return mask_.cast<Index>().sum(); }

IndexList ResponseDataset::observed_items(Index i) const {
  IndexList out;
  for (Index j = 0; j < items(); ++j)
    if (mask_(i, j)) out.push_back(j);
  return out;
}

ResponseDataset ResponseDataset::without(const Mask& hidden) const {
  if (hidden.rows() != persons() || hidden.cols() != items()) throw DimensionError("hidden mask has the wrong shape");
  Mask m = mask_;
  for (Index i = 0; i < m.size(); ++i)
    if (hidden.data()[i]) m.data()[i] = 0;
  ResponseDataset out(values_, m, mode_);
  out.person_ids = person_ids;
  out.item_ids = item_ids;
  out.truth = truth;
  return out;
}

ResponseDataset ResponseDataset::binarized() const {
  Matrix v = values_.array().round();
  ResponseDataset out(v, mask_, ResponseMode::Binary);
  out.person_ids = person_ids;
  out.item_ids = item_ids;
  out.truth = truth;
  return out;
}

double sample_truncated_normal(double mean, double sigma, Rng& rng) {
  if (!std::isfinite(mean) || !(sigma > 0.0) || !std::isfinite(sigma))
    throw DomainError("truncated normal needs a finite mean and a positive sigma");
  auto cdf = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  const double mass = cdf((1.0 - mean) / sigma) - cdf(-mean / sigma);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  constexpr int kAttempts = 100000;
  if (mass >= 0.1) {
    std::normal_distribution<double> normal(mean, sigma);
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
      const double x = normal(rng);
      if (x >= 0.0 && x <= 1.0) return x;
    }
  } else if (mean >= 0.0 && mean <= 1.0) {
    // Small mass with the mode inside means sigma >> 1: the density is nearly flat.
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
      const double x = uniform(rng);
      const double t = (x - mean) / sigma;
      if (uniform(rng) <= std::exp(-0.5 * t * t)) return x;
    }
  } else {
    // Mode outside the interval: reflect so it lies below 0, then use a
    // translated-exponential proposal on the standardized tail [alpha, beta].
    const bool reflect = mean > 1.0;
    const double m = reflect ? 1.0 - mean : mean;
    const double alpha = -m / sigma, beta = (1.0 - m) / sigma;
    const double lambda = 0.5 * (alpha + std::sqrt(alpha * alpha + 4.0));
    std::exponential_distribution<double> expo(lambda);
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
      const double z = alpha + expo(rng);
      if (z > beta) continue;
      if (uniform(rng) <= std::exp(-0.5 * (z - lambda) * (z - lambda))) {
        const double x = std::clamp(m + sigma * z, 0.0, 1.0);
        return reflect ? 1.0 - x : x;
      }
    }
  }
  throw NumericalError("truncated normal rejection sampler did not accept");
}

ResponseDataset simulate(const SimulateOptions& o) {
  if (o.N < 1 || o.M < 1) throw ConfigError("simulate needs N >= 1 and M >= 1");
  if (!(o.missing_frac >= 0.0 && o.missing_frac < 1.0)) throw ConfigError("missing_frac must lie in [0, 1)");
  ModelSpec spec;
  spec.family = o.family;
  spec.K = o.K;
  spec.mode = o.mode;
  spec.validate();
  if (spec.uses_networks()) throw ConfigError("simulate supports analytic families only");

  Rng rng(o.seed);
  GroundTruth truth{spec, standard_normal(rng, o.N, o.K), standard_normal(rng, o.M, spec.item_dim())};
  if (o.fixed_items) {
    if (o.fixed_items->rows() != o.M || o.fixed_items->cols() != spec.item_dim())
      throw DimensionError("fixed item table must be M x P");
    truth.items = *o.fixed_items;
  }

  Rng model_rng(o.seed);
  const GenerativeModel model(spec, model_rng);
  Matrix values(o.N, o.M);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  IndexList rows(static_cast<std::size_t>(o.M));
  std::iota(rows.begin(), rows.end(), 0);
  for (Index i = 0; i < o.N; ++i) {
    const Matrix a = truth.abilities.row(i).replicate(o.M, 1);
    const Matrix p = model.prob(a, truth.items);
    for (Index j = 0; j < o.M; ++j)
      values(i, j) = o.mode == ResponseMode::Binary ? (uniform(rng) < p(j, 0) ? 1.0 : 0.0)
                                                    : sample_truncated_normal(p(j, 0), kContinuousSigma, rng);
  }

  Mask mask = Mask::Ones(o.N, o.M);
  const Index cells = o.N * o.M;
  const auto hidden = static_cast<Index>(std::llround(o.missing_frac * static_cast<double>(cells)));
  std::vector<Index> order(static_cast<std::size_t>(cells));
  std::iota(order.begin(), order.end(), 0);
  for (Index c = 0; c < hidden; ++c) {
    std::uniform_int_distribution<Index> pick(c, cells - 1);
    std::swap(order[static_cast<std::size_t>(c)], order[static_cast<std::size_t>(pick(rng))]);
    mask.data()[order[static_cast<std::size_t>(c)]] = 0;
  }

  ResponseDataset data(values, mask, o.mode);
  for (Index i = 0; i < o.N; ++i) data.person_ids.push_back("p" + std::to_string(i + 1));
  for (Index j = 0; j < o.M; ++j) data.item_ids.push_back("item_" + std::to_string(j + 1));
  data.truth = std::move(truth);
  return data;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && (s[b] == ' ' || s[b] == '\t')) ++b;
  return s.substr(b);
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(trim(line));
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

std::string format_real(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

double parse_real(const std::string& s, bool& ok) {
  ok = false;
  if (s.empty()) return 0.0;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    return 0.0;
  }
  ok = used == s.size() && std::isfinite(v);
  return v;
}

}  // namespace

ResponseDataset parse_csv(const std::string& text) {
  const auto lines = lines_of(text);
  if (lines.empty()) throw ParseError("empty response file", 1, 0);
  const auto header = split(lines[0]);
  if (header.size() < 2 || trim(header[0]) != "person_id")
    throw ParseError("header must be person_id followed by at least one item column", 1, 0);
  const auto M = static_cast<Index>(header.size() - 1);
  const auto N = static_cast<Index>(lines.size() - 1);

  Matrix values = Matrix::Zero(N, M);
  Mask mask = Mask::Zero(N, M);
  std::vector<std::string> person_ids;
  std::set<std::string> seen;
  bool continuous = false;
  for (Index i = 0; i < N; ++i) {
    const std::size_t line_no = static_cast<std::size_t>(i) + 2;
    const std::size_t row_no = static_cast<std::size_t>(i) + 1;
    auto where = [&]() { return "row " + std::to_string(row_no) + " (line " + std::to_string(line_no) + ")"; };
    const auto cells = split(lines[static_cast<std::size_t>(i) + 1]);
    if (static_cast<Index>(cells.size()) != M + 1)
      throw ParseError(where() + ": expected " + std::to_string(M + 1) + " cells, found " +
                           std::to_string(cells.size()),
                       line_no, row_no);
    const std::string id = trim(cells[0]);
    if (id.empty()) throw ParseError(where() + ": empty person_id", line_no, row_no);
    if (!seen.insert(id).second) throw ParseError(where() + ": duplicate person_id '" + id + "'", line_no, row_no);
    person_ids.push_back(id);
    for (Index j = 0; j < M; ++j) {
      const std::string cell = trim(cells[static_cast<std::size_t>(j) + 1]);
      if (cell == "NA") continue;
      bool ok = false;
      const double v = parse_real(cell, ok);
      if (!ok || v < 0.0 || v > 1.0)
        throw ParseError(where() + ", column " + std::to_string(j + 2) + ": invalid response '" + cell + "'",
                         line_no, row_no);
      values(i, j) = v;
      mask(i, j) = 1;
      if (v != std::round(v) || cell.find_first_of(".eE") != std::string::npos) continuous = true;
    }
  }
  ResponseDataset data(values, mask, continuous ? ResponseMode::Continuous : ResponseMode::Binary);
  data.person_ids = std::move(person_ids);
  for (std::size_t c = 1; c < header.size(); ++c) data.item_ids.push_back(trim(header[c]));
  return data;
}

ResponseDataset read_csv(const fs::path& path) { return parse_csv(read_text(path)); }

std::string format_csv(const ResponseDataset& data) {
  std::ostringstream out;
  out << "person_id";
  for (Index j = 0; j < data.items(); ++j)
    out << ',' << (data.item_ids.empty() ? "item_" + std::to_string(j + 1) : data.item_ids[static_cast<std::size_t>(j)]);
  out << '\n';
  for (Index i = 0; i < data.persons(); ++i) {
    out << (data.person_ids.empty() ? "p" + std::to_string(i + 1) : data.person_ids[static_cast<std::size_t>(i)]);
    for (Index j = 0; j < data.items(); ++j) {
      out << ',';
      if (!data.observed(i, j)) {
        out << "NA";
        continue;
      }
      const double v = data.value(i, j);
      if (data.mode() == ResponseMode::Binary) {
        out << (v == 1.0 ? '1' : '0');
      } else {
        std::string s = format_real(v);
        if (s.find_first_of(".eE") == std::string::npos) s += ".0";
        out << s;
      }
    }
    out << '\n';
  }
  return out.str();
}

void write_csv(const ResponseDataset& data, const fs::path& path) { write_text(path, format_csv(data)); }

namespace {

fs::path sibling(const fs::path& path, const std::string& suffix) {
  return path.parent_path() / (path.stem().string() + suffix);
}

}  // namespace

void write_ground_truth(const ResponseDataset& data, const fs::path& path) {
  if (!data.truth) throw ConfigError("dataset carries no ground truth");
  const GroundTruth& t = *data.truth;
  std::ostringstream a;
  a << std::setprecision(17) << "person_id";
  for (Index k = 0; k < t.spec.K; ++k) a << ",a_" << (k + 1);
  a << '\n';
  for (Index i = 0; i < t.abilities.rows(); ++i) {
    a << (data.person_ids.empty() ? "p" + std::to_string(i + 1) : data.person_ids[static_cast<std::size_t>(i)]);
    for (Index k = 0; k < t.spec.K; ++k) a << ',' << t.abilities(i, k);
    a << '\n';
  }
  write_text(sibling(path, ".abilities.csv"), a.str());
  write_text(sibling(path, ".items.csv"), item_params_csv(t.spec, t.items, data.item_ids));
}

std::optional<GroundTruth> read_ground_truth(const fs::path& path) {
  const fs::path ap = sibling(path, ".abilities.csv"), ip = sibling(path, ".items.csv");
  if (!fs::exists(ap) || !fs::exists(ip)) return std::nullopt;

  const auto item_lines = lines_of(read_text(ip));
  if (item_lines.size() < 2) throw ParseError("item truth file has no rows", 1, 0);
  const auto header = split(item_lines[0]);
  Index K = 0;
  for (const auto& h : header)
    if (h.rfind("k_", 0) == 0) ++K;
  GroundTruth t;
  t.spec.K = K;
  t.spec.family = family_from_string(trim(split(item_lines[1]).at(1)));
  t.items.resize(static_cast<Index>(item_lines.size() - 1), t.spec.item_dim());
  for (std::size_t r = 1; r < item_lines.size(); ++r) {
    const auto cells = split(item_lines[r]);
    if (cells.size() != static_cast<std::size_t>(K) + 5)
      throw ParseError("item truth row has the wrong number of cells", r + 1, r);
    auto num = [&](std::size_t c) {
      bool ok = false;
      const double v = parse_real(trim(cells[c]), ok);
      if (!ok) throw ParseError("item truth cell is not a number", r + 1, r);
      return v;
    };
    ItemParams p;
    Vector k(K);
    for (Index c = 0; c < K; ++c) k(c) = num(3 + static_cast<std::size_t>(c));
    if (t.spec.family == Family::Deep) {
      p.e = k;
    } else {
      p.k = k;
      p.d = num(2);
    }
    if (!trim(cells[3 + static_cast<std::size_t>(K)]).empty()) p.g = num(3 + static_cast<std::size_t>(K));
    if (!trim(cells[4 + static_cast<std::size_t>(K)]).empty()) p.b = num(4 + static_cast<std::size_t>(K));
    t.items.row(static_cast<Index>(r - 1)) = p.to_unconstrained(t.spec).transpose();
  }

  const auto ability_lines = lines_of(read_text(ap));
  t.abilities.resize(static_cast<Index>(ability_lines.size()) - 1, K);
  for (std::size_t r = 1; r < ability_lines.size(); ++r) {
    const auto cells = split(ability_lines[r]);
    if (cells.size() != static_cast<std::size_t>(K) + 1)
      throw ParseError("ability truth row has the wrong number of cells", r + 1, r);
    for (Index c = 0; c < K; ++c) {
      bool ok = false;
      t.abilities(static_cast<Index>(r - 1), c) = parse_real(trim(cells[1 + static_cast<std::size_t>(c)]), ok);
      if (!ok) throw ParseError("ability truth cell is not a number", r + 1, r);
    }
  }
  return t;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace vibo
