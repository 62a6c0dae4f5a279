#include "doctest.h"

#include "vibo/baselines.hpp"
#include "vibo/evaluation.hpp"

#include <cmath>

using namespace vibo;

namespace {

ModelSpec spec_of(Family f, Index K = 1) {
  ModelSpec s;
  s.family = f;
  s.K = K;
  return s;
}

GenerativeModel analytic(const ModelSpec& spec) {
  Rng rng(0);
  return GenerativeModel(spec, rng);
}

Vector item_row(const ModelSpec& spec, double k, double d) {
  ItemParams p;
  p.k = Vector::Constant(spec.K, k);
  p.d = d;
  return p.to_unconstrained(spec);
}

ResponseDataset dataset(const Matrix& values, const Mask& mask) {
  return ResponseDataset(values, mask, ResponseMode::Binary);
}

ResponseDataset synthetic(Index N, Index M, std::uint64_t seed, Family f = Family::TwoPL) {
  SimulateOptions o;
  o.family = f;
  o.N = N;
  o.M = M;
  o.seed = seed;
  return simulate(o);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("normal Gauss-Hermite weights sum to one and integrate even moments exactly") {
  const QuadratureRule rule = gauss_hermite_normal(61);
  REQUIRE(rule.size() == 61);
  CHECK(std::abs(rule.weights.sum() - 1.0) < 1e-10);
  double double_factorial = 1.0;
  for (int degree = 1; degree <= 20; ++degree) {
    double m = 0.0;
    for (Index q = 0; q < rule.size(); ++q) m += rule.weights(q) * std::pow(rule.nodes(q, 0), degree);
    if (degree % 2) {
      CHECK(std::abs(m) < 1e-8);
    } else {
      double_factorial *= degree - 1;
      CHECK(std::abs(m - double_factorial) / double_factorial < 1e-8);
    }
  }
  CHECK((rule.weights.array() > 0.0).all());
}

TEST_CASE("tensor-product rules cover K dimensions with unit mass") {
  const QuadratureRule r2 = quadrature_rule(2, 11);
  CHECK(r2.size() == 121);
  CHECK(r2.dim() == 2);
  CHECK(std::abs(r2.weights.sum() - 1.0) < 1e-10);
  double cross = 0.0, second = 0.0;
  for (Index q = 0; q < r2.size(); ++q) {
    cross += r2.weights(q) * r2.nodes(q, 0) * r2.nodes(q, 1);
    second += r2.weights(q) * r2.nodes(q, 1) * r2.nodes(q, 1);
  }
  CHECK(std::abs(cross) < 1e-12);
  CHECK(second == doctest::Approx(1.0).epsilon(1e-10));
  CHECK_THROWS_AS(quadrature_rule(4, 5), ConfigError);
  CHECK_THROWS_AS(gauss_hermite_normal(0), ConfigError);
}

TEST_CASE("JMLE ranks an all-correct person above an all-wrong person") {
  Matrix values = Matrix::Zero(2, 20);
  values.row(0).setOnes();
  const ResponseDataset data = dataset(values, Mask::Ones(2, 20));
  JmleConfig cfg;
  cfg.epochs = 200;
  const JmleResult r = fit_jmle(data, spec_of(Family::OnePL), cfg);
  CHECK(r.estimates.abilities(0, 0) > r.estimates.abilities(1, 0));
}

TEST_CASE("JMLE with zero epochs or a vanishing learning rate keeps the initial values") {
  const ResponseDataset data = synthetic(30, 8, 1);
  JmleConfig cfg;
  cfg.seed = 4;
  cfg.epochs = 0;
  const JmleResult init = fit_jmle(data, spec_of(Family::TwoPL), cfg);
  CHECK(init.trace.empty());
  CHECK(init.estimates.abilities.rows() == 30);
  CHECK(init.estimates.items.rows() == 8);
  CHECK(init.estimates.abilities.norm() > 0.0);

  cfg.epochs = 3;
  cfg.learning_rate = 1e-300;
  const JmleResult frozen = fit_jmle(data, spec_of(Family::TwoPL), cfg);
  CHECK(frozen.trace.size() == 3);
  CHECK(frozen.estimates.abilities == init.estimates.abilities);
  CHECK(frozen.estimates.items == init.estimates.items);
}

TEST_CASE("JMLE is deterministic and recovers abilities on a 2PL bank") {
  const ResponseDataset data = synthetic(2000, 50, 3);
  JmleConfig cfg;
  cfg.seed = 2;
  const JmleResult a = fit_jmle(data, spec_of(Family::TwoPL), cfg);
  const JmleResult b = fit_jmle(data, spec_of(Family::TwoPL), cfg);
  CHECK(a.estimates.abilities == b.estimates.abilities);
  CHECK(a.trace == b.trace);
  CHECK(aligned_recovery_correlation(a.estimates.abilities, data.truth->abilities) >= 0.85);
}

TEST_CASE("JMLE rejects network families and mismatched response modes") {
  const ResponseDataset data = synthetic(5, 3, 1);
  CHECK_THROWS_AS(fit_jmle(data, spec_of(Family::Deep), JmleConfig{}), ConfigError);
  ModelSpec cont = spec_of(Family::TwoPL);
  cont.mode = ResponseMode::Continuous;
  CHECK_THROWS_AS(fit_jmle(data, cont, JmleConfig{}), ConfigError);
}

TEST_CASE("E step of an ability-free coin-flip item gives marginal 0.5") {
  const ModelSpec spec = spec_of(Family::TwoPL);
  Matrix items(1, spec.item_dim());
  items.row(0) = item_row(spec, 0.0, 0.0).transpose();
  Matrix values(2, 1);
  values << 1, 0;
  const EStep e = em_estep(analytic(spec), items, quadrature_rule(1), dataset(values, Mask::Ones(2, 1)));
  CHECK(std::exp(e.cell_marginal(0, 0)) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(std::exp(e.cell_marginal(1, 0)) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("E step marginal matches dense trapezoid integration") {
  const ModelSpec spec = spec_of(Family::TwoPL);
  const double k = 1.3, d = -0.4;
  Matrix items(1, spec.item_dim());
  items.row(0) = item_row(spec, k, d).transpose();
  Matrix values(1, 1);
  values << 1;
  const EStep e = em_estep(analytic(spec), items, quadrature_rule(1), dataset(values, Mask::Ones(1, 1)));

  const int n = 1000000;
  const double lo = -12.0, hi = 12.0, h = (hi - lo) / n;
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double a = lo + i * h;
    const double f = sigmoid(k * a + d) * std::exp(-0.5 * a * a) / std::sqrt(2.0 * M_PI);
    acc += (i == 0 || i == n) ? 0.5 * f : f;
  }
  CHECK(std::abs(std::exp(e.cell_marginal(0, 0)) - acc * h) < 1e-6);
}

TEST_CASE("a person with no responses keeps the prior node weights") {
  const ResponseDataset data = synthetic(3, 4, 2);
  Mask mask = Mask::Ones(3, 4);
  mask.row(2).setZero();
  const ResponseDataset masked(data.values(), mask, ResponseMode::Binary);
  const QuadratureRule rule = quadrature_rule(1);
  const EStep e = em_estep(analytic(spec_of(Family::TwoPL)), data.truth->items, rule, masked);
  CHECK((e.node_weights.row(2).transpose() - rule.weights).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(e.person_marginal(2) == doctest::Approx(0.0));
  CHECK(e.cell_marginal.row(2).isZero(0.0));
  CHECK(std::abs(e.node_weights.row(0).sum() - 1.0) < 1e-12);
}

TEST_CASE("E step stays finite when every product of probabilities underflows") {
  const ModelSpec spec = spec_of(Family::TwoPL);
  const Index M = 2000;
  Matrix items(M, spec.item_dim());
  for (Index j = 0; j < M; ++j) items.row(j) = item_row(spec, 4.0, 0.0).transpose();
  Matrix values = Matrix::Zero(1, M);
  for (Index j = 0; j < M; j += 2) values(0, j) = 1.0;
  const EStep e = em_estep(analytic(spec), items, quadrature_rule(1), dataset(values, Mask::Ones(1, M)));
  CHECK(std::isfinite(e.person_marginal(0)));
  CHECK(e.person_marginal(0) < -745.0);  // exp() of this is 0 in double
  CHECK(std::abs(e.node_weights.row(0).sum() - 1.0) < 1e-12);
}

TEST_CASE("M step puts a half-correct item under prior weights at d = 0") {
  const ModelSpec spec = spec_of(Family::OnePL);
  const GenerativeModel model = analytic(spec);
  const QuadratureRule rule = quadrature_rule(1);
  Matrix values(40, 1);
  for (Index i = 0; i < 40; ++i) values(i, 0) = i % 2;
  const ResponseDataset data = dataset(values, Mask::Ones(40, 1));
  Matrix items = Matrix::Constant(1, spec.item_dim(), 0.8);
  EStep e = em_estep(model, items, rule, data);
  for (Index i = 0; i < 40; ++i) e.node_weights.row(i) = rule.weights.transpose();
  const MStep m = em_mstep(model, data, e, rule, items, EmConfig{});
  CHECK(std::abs(ItemParams::from_unconstrained(spec, m.items.row(0).transpose()).d) < 1e-3);
  CHECK_FALSE(m.flagged(0));
}

TEST_CASE("M step caps and flags an all-correct item") {
  const ModelSpec spec = spec_of(Family::OnePL);
  const GenerativeModel model = analytic(spec);
  const QuadratureRule rule = quadrature_rule(1);
  Matrix values = Matrix::Ones(30, 1);
  const ResponseDataset data = dataset(values, Mask::Ones(30, 1));
  const Matrix items = Matrix::Zero(1, spec.item_dim());
  const EStep e = em_estep(model, items, rule, data);
  const MStep m = em_mstep(model, data, e, rule, items, EmConfig{});
  CHECK(ItemParams::from_unconstrained(spec, m.items.row(0).transpose()).d == doctest::Approx(6.0));
  CHECK(m.capped[0]);
  CHECK(m.flagged(0));
}

TEST_CASE("one EM iteration never lowers the marginal log-likelihood") {
  const ModelSpec spec = spec_of(Family::TwoPL);
  const GenerativeModel model = analytic(spec);
  const QuadratureRule rule = quadrature_rule(1);
  const ResponseDataset data = synthetic(150, 8, 9);
  Rng rng(17);
  for (int start = 0; start < 20; ++start) {
    const Matrix items = standard_normal(rng, 8, spec.item_dim());
    const EStep before = em_estep(model, items, rule, data);
    const MStep m = em_mstep(model, data, before, rule, items, EmConfig{});
    const EStep after = em_estep(model, m.items, rule, data);
    CHECK(after.marginal_loglik >= before.marginal_loglik - 1e-10);
  }
}

TEST_CASE("EM recovers item difficulties and its trace is nondecreasing") {
  const ResponseDataset data = synthetic(2000, 25, 10);
  const ModelSpec spec = spec_of(Family::TwoPL);
  const EmResult r = em_fit(data, spec, EmConfig{});
  const Index di = spec.layout().d_index;
  CHECK(recovery_correlation(r.estimates.items.col(di), data.truth->items.col(di)) >= 0.9);
  for (std::size_t t = 1; t < r.trace.size(); ++t) CHECK(r.trace[t] >= r.trace[t - 1] - 1e-10);
  CHECK(r.estimates.abilities.rows() == 2000);
  CHECK(r.iterations > 0);
}

TEST_CASE("EM initial items use k = 1 and the logit of the proportion correct") {
  Matrix values(4, 2);
  values << 1, 0, 1, 0, 1, 1, 0, 0;
  const ModelSpec spec = spec_of(Family::TwoPL);
  const Matrix init = em_initial_items(dataset(values, Mask::Ones(4, 2)), spec);
  const ItemParams p0 = ItemParams::from_unconstrained(spec, init.row(0).transpose());
  const ItemParams p1 = ItemParams::from_unconstrained(spec, init.row(1).transpose());
  CHECK(p0.k(0) == 1.0);
  CHECK(p0.d == doctest::Approx(std::log(0.75 / 0.25)));
  CHECK(p1.d == doctest::Approx(std::log(0.25 / 0.75)));
}

TEST_CASE("EM rejects continuous data and more than three dimensions") {
  SimulateOptions o;
  o.N = 5;
  o.M = 3;
  o.mode = ResponseMode::Continuous;
  ModelSpec cont = spec_of(Family::TwoPL);
  cont.mode = ResponseMode::Continuous;
  CHECK_THROWS_AS(em_fit(simulate(o), cont, EmConfig{}), ConfigError);
  CHECK_THROWS_AS(em_fit(synthetic(5, 3, 1), spec_of(Family::TwoPL, 4), EmConfig{}), ConfigError);
}
