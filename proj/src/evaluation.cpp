#include "vibo/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace vibo {

namespace {

constexpr Index kChunk = 512;

IndexList range(Index begin, Index end) {
  IndexList out(static_cast<std::size_t>(end - begin));
  std::iota(out.begin(), out.end(), begin);
  return out;
}

}  // namespace

HoldoutSplit make_holdout(const ResponseDataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("holdout fraction must lie in (0, 1)");
  std::vector<std::pair<Index, Index>> observed;
  for (Index i = 0; i < data.persons(); ++i)
    for (Index j = 0; j < data.items(); ++j)
      if (data.observed(i, j)) observed.emplace_back(i, j);
  const auto n = static_cast<Index>(observed.size());
  const auto take = static_cast<Index>(std::llround(fraction * static_cast<double>(n)));
  if (take < 1) throw ConfigError("holdout would contain no cells");
  Rng rng(seed);
  for (Index c = 0; c < take; ++c) {
    std::uniform_int_distribution<Index> pick(c, n - 1);
    std::swap(observed[static_cast<std::size_t>(c)], observed[static_cast<std::size_t>(pick(rng))]);
  }
  HoldoutSplit split;
  split.fraction = fraction;
  split.seed = seed;
  split.cells.assign(observed.begin(), observed.begin() + take);
  std::sort(split.cells.begin(), split.cells.end());
  split.hidden = Mask::Zero(data.persons(), data.items());
  for (const auto& [i, j] : split.cells) split.hidden(i, j) = 1;
  return split;
}

double impute_accuracy(const std::vector<double>& probs, const ResponseDataset& data, const HoldoutSplit& split) {
  if (split.cells.empty()) throw ConfigError("empty holdout");
  if (probs.size() != split.cells.size()) throw DimensionError("one prediction per held-out cell is required");
  std::size_t hits = 0;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    const auto [i, j] = split.cells[c];
    if (!data.observed(i, j)) throw DomainError("held-out cell was not observed in the source data");
    if (!(probs[c] >= 0.0 && probs[c] <= 1.0)) throw DomainError("predicted probability outside [0, 1]");
    const double truth = data.mode() == ResponseMode::Continuous ? std::round(data.value(i, j)) : data.value(i, j);
    const double predicted = probs[c] >= 0.5 ? 1.0 : 0.0;
    hits += predicted == truth;
  }
  return static_cast<double>(hits) / static_cast<double>(probs.size());
}

std::vector<double> predict_cells(const GenerativeModel& model, const PointEstimates& est,
                                  const std::vector<std::pair<Index, Index>>& cells) {
  IndexList persons, items;
  for (const auto& [i, j] : cells) {
    persons.push_back(i);
    items.push_back(j);
  }
  const Matrix p = model.prob(ad::gather_rows(est.abilities, persons), ad::gather_rows(est.items, items));
  return {p.data(), p.data() + p.size()};
}

double impute_accuracy(const GenerativeModel& model, const PointEstimates& est, const ResponseDataset& data,
                       const HoldoutSplit& split) {
  return impute_accuracy(predict_cells(model, est, split.cells), data, split);
}

double impute_accuracy(const ViboModel& model, const ResponseDataset& data, const HoldoutSplit& split, int samples,
                       std::uint64_t seed) {
  const PointEstimates est = posterior_means(model, split.training_view(data), samples, seed);
  return impute_accuracy(model.generative, est, data, split);
}

PosteriorSummary posterior_summary(const ViboModel& model, const ResponseDataset& data, int samples,
                                   std::uint64_t seed) {
  const auto& post = model.posterior;
  const Index N = data.persons(), M = post.items(), P = post.P(), K = post.K();
  if (samples < 1) throw ConfigError("posterior summary needs at least one sample");
  const bool mc = post.flow_count() > 0;
  const ViboOptions opt{1.0, 1.0, mc ? KlEstimator::SingleSample : KlEstimator::ClosedForm};
  PlainContext ctx;
  PosteriorSummary out{Matrix::Zero(N, K), Matrix::Zero(N, K), Matrix::Zero(M, P), Matrix::Zero(M, P)};

  if (!mc) {
    out.item_mu = post.phi().value(post.item_table().mu_name());
    out.item_var = post.phi().value(post.item_table().log_var_name()).array().exp();
    ViboNoise noise{Matrix::Zero(M, P), Matrix()};
    for (Index begin = 0; begin < N; begin += kChunk) {
      const Index end = std::min(N, begin + kChunk);
      noise.ability_eps = Matrix::Zero(end - begin, K);
      const auto rows = vibo_rows(ctx, model, data, range(begin, end), noise, opt);
      out.ability_mu.middleRows(begin, end - begin) = rows.ability_mu;
      out.ability_var.middleRows(begin, end - begin) = rows.ability_log_var.array().exp();
    }
    return out;
  }

  Rng rng(seed);
  for (int s = 0; s < samples; ++s) {
    ViboNoise noise;
    noise.item_eps = standard_normal(rng, M, P);
    for (Index begin = 0; begin < N; begin += kChunk) {
      const Index end = std::min(N, begin + kChunk);
      noise.ability_eps = standard_normal(rng, end - begin, K);
      const auto rows = vibo_rows(ctx, model, data, range(begin, end), noise, opt);
      out.ability_mu.middleRows(begin, end - begin) += rows.abilities;
      out.ability_var.middleRows(begin, end - begin) += rows.abilities.cwiseAbs2();
      if (begin == 0) {
        out.item_mu += rows.items;
        out.item_var += rows.items.cwiseAbs2();
      }
    }
  }
  const double inv = 1.0 / samples;
  out.ability_mu *= inv;
  out.item_mu *= inv;
  out.ability_var = (out.ability_var * inv - out.ability_mu.cwiseAbs2()).cwiseMax(0.0);
  out.item_var = (out.item_var * inv - out.item_mu.cwiseAbs2()).cwiseMax(0.0);
  return out;
}

PointEstimates posterior_means(const ViboModel& model, const ResponseDataset& data, int samples, std::uint64_t seed) {
  auto s = posterior_summary(model, data, samples, seed);
  return {std::move(s.ability_mu), std::move(s.item_mu)};
}

Vector correlation_per_dim(const Matrix& inferred, const Matrix& truth) {
  if (inferred.rows() != truth.rows() || inferred.cols() != truth.cols())
    throw DimensionError("inferred and true tables must have the same shape");
  if (inferred.rows() < 2) throw DomainError("correlation needs at least two rows");
  Vector out(inferred.cols());
  for (Index c = 0; c < inferred.cols(); ++c) {
    const auto x = (inferred.col(c).array() - inferred.col(c).mean()).eval();
    const auto y = (truth.col(c).array() - truth.col(c).mean()).eval();
    const double sxx = x.square().sum(), syy = y.square().sum();
    if (!(sxx > 0.0) || !(syy > 0.0)) throw DomainError("undefined correlation: zero variance");
    out(c) = (x * y).sum() / std::sqrt(sxx * syy);
  }
  return out;
}

double recovery_correlation(const Matrix& inferred, const Matrix& truth) {
  return correlation_per_dim(inferred, truth).mean();
}

double aligned_recovery_correlation(const Matrix& inferred, const Matrix& truth) {
  return correlation_per_dim(inferred, truth).cwiseAbs().mean();
}

LogMarginal log_marginal(const ViboModel& model, const ResponseDataset& data, int samples, std::uint64_t seed) {
  if (samples < 1) throw ConfigError("log_marginal needs at least one sample");
  const auto& post = model.posterior;
  const Index N = data.persons(), M = post.items(), P = post.P(), K = post.K();
  const ViboOptions opt{1.0, 1.0, KlEstimator::SingleSample};
  // Draw s shares one item sample across persons; each person's S weights stay i.i.d.
  Matrix log_w(N, samples);
  Rng rng(seed);
  PlainContext ctx;
  for (int s = 0; s < samples; ++s) {
    ViboNoise noise;
    noise.item_eps = standard_normal(rng, M, P);
    for (Index begin = 0; begin < N; begin += kChunk) {
      const Index end = std::min(N, begin + kChunk);
      noise.ability_eps = standard_normal(rng, end - begin, K);
      log_w.block(begin, s, end - begin, 1) = vibo_rows(ctx, model, data, range(begin, end), noise, opt).total;
    }
  }
  LogMarginal out;
  out.per_person.resize(N);
  const double log_s = std::log(static_cast<double>(samples));
  for (Index i = 0; i < N; ++i) {
    const double mx = log_w.row(i).maxCoeff();
    if (!std::isfinite(mx))
      throw NumericalError("all importance weights underflowed for person " + std::to_string(i) +
                           " (max log-weight " + std::to_string(mx) + ")");
    out.per_person(i) = mx + std::log((log_w.row(i).array() - mx).exp().sum()) - log_s;
  }
  out.total = out.per_person.sum();
  return out;
}

PredictiveStats posterior_predictive_stats(const ViboModel& model, const ResponseDataset& data, int samples,
                                           std::uint64_t seed) {
  if (samples < 1) throw ConfigError("posterior predictive needs at least one sample");
  const auto& post = model.posterior;
  const auto& gen = model.generative;
  const Index N = data.persons(), M = post.items(), P = post.P(), K = post.K();
  const ViboOptions opt{1.0, 1.0, post.flow_count() > 0 ? KlEstimator::SingleSample : KlEstimator::ClosedForm};
  const bool continuous = data.mode() == ResponseMode::Continuous;

  Vector person_sum = Vector::Zero(N), item_sum = Vector::Zero(M);
  Vector person_n = Vector::Zero(N), item_n = Vector::Zero(M);
  for (Index i = 0; i < N; ++i)
    for (Index j = 0; j < M; ++j)
      if (data.observed(i, j)) {
        person_n(i) += samples;
        item_n(j) += samples;
      }

  Rng rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  PlainContext ctx;
  for (int s = 0; s < samples; ++s) {
    ViboNoise noise;
    noise.item_eps = standard_normal(rng, M, P);
    const Matrix* items = nullptr;
    Matrix item_sample;
    for (Index begin = 0; begin < N; begin += kChunk) {
      const Index end = std::min(N, begin + kChunk);
      noise.ability_eps = standard_normal(rng, end - begin, K);
      const auto rows = vibo_rows(ctx, model, data, range(begin, end), noise,
                                  {opt.beta, opt.item_kl_weight, KlEstimator::SingleSample});
      if (!items) {
        item_sample = rows.items;
        items = &item_sample;
      }
      IndexList ps, js;
      for (Index b = begin; b < end; ++b)
        for (Index j = 0; j < M; ++j)
          if (data.observed(b, j)) {
            ps.push_back(b - begin);
            js.push_back(j);
          }
      if (ps.empty()) continue;
      const Matrix p = gen.prob(ad::gather_rows(rows.abilities, ps), ad::gather_rows(*items, js));
      for (std::size_t c = 0; c < ps.size(); ++c) {
        const double pc = p(static_cast<Index>(c), 0);
        const double r = continuous ? sample_truncated_normal(pc, kContinuousSigma, rng) : (uniform(rng) < pc ? 1.0 : 0.0);
        person_sum(begin + ps[c]) += r;
        item_sum(js[c]) += r;
      }
    }
  }
  PredictiveStats out;
  out.person_means = (person_n.array() > 0).select(person_sum.array() / person_n.array(), 0.0);
  out.item_means = (item_n.array() > 0).select(item_sum.array() / item_n.array(), 0.0);
  return out;
}

nlohmann::json metrics_json(const Metrics& m) {
  nlohmann::json j = nlohmann::json::object();
  if (m.accuracy) j["accuracy"] = *m.accuracy;
  if (m.correlation_per_dim)
    j["correlation_per_dim"] = std::vector<double>(m.correlation_per_dim->data(),
                                                   m.correlation_per_dim->data() + m.correlation_per_dim->size());
  if (m.item_correlation) j["item_correlation"] = *m.item_correlation;
  if (m.log_marginal) j["log_marginal"] = *m.log_marginal;
  if (m.wall_clock_sec) j["wall_clock_sec"] = *m.wall_clock_sec;
  if (m.predictive) {
    const auto& p = *m.predictive;
    j["ppc_person_means"] = std::vector<double>(p.person_means.data(), p.person_means.data() + p.person_means.size());
    j["ppc_item_means"] = std::vector<double>(p.item_means.data(), p.item_means.data() + p.item_means.size());
  }
  return j;
}

}  // namespace vibo
