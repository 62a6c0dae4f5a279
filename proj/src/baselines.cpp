#include "vibo/baselines.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace vibo {

namespace {

// Orthonormal probabilists' Hermite values p_{n-1}(x), p_n(x).
std::pair<double, double> hermite_pair(int n, double x) {
  double prev = 0.0, cur = 1.0;  // p_{-1}, p_0
  for (int k = 0; k < n; ++k) {
    const double next = (x * cur - std::sqrt(static_cast<double>(k)) * prev) / std::sqrt(static_cast<double>(k + 1));
    prev = cur;
    cur = next;
  }
  return {prev, cur};
}

double logsumexp(const double* v, Index n) {
  double m = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < n; ++i) m = std::max(m, v[i]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (Index i = 0; i < n; ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

void require_analytic(const ModelSpec& spec, const char* who) {
  if (spec.uses_networks()) throw ConfigError(std::string(who) + " supports analytic families only");
}

}  // namespace

QuadratureRule gauss_hermite_normal(int n) {
  if (n < 1) throw ConfigError("quadrature needs at least one node");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi, Eigen::EigenvaluesOnly);
  QuadratureRule rule;
  rule.nodes.resize(n, 1);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    double x = eig.eigenvalues()(i);
    for (int it = 0; it < 100; ++it) {
      const auto [pm1, pn] = hermite_pair(n, x);
      const double step = pn / (std::sqrt(static_cast<double>(n)) * pm1);
      x -= step;
      if (std::abs(step) <= 1e-16 * std::max(1.0, std::abs(x))) break;
    }
    const double pm1 = hermite_pair(n, x).first;
    rule.nodes(i, 0) = x;
    rule.weights(i) = 1.0 / (static_cast<double>(n) * pm1 * pm1);
  }
  // Symmetrize so odd moments vanish exactly.
  for (int i = 0; i < n / 2; ++i) {
    const int j = n - 1 - i;
    const double x = 0.5 * (rule.nodes(j, 0) - rule.nodes(i, 0));
    const double w = 0.5 * (rule.weights(i) + rule.weights(j));
    rule.nodes(i, 0) = -x;
    rule.nodes(j, 0) = x;
    rule.weights(i) = rule.weights(j) = w;
  }
  if (n % 2) rule.nodes(n / 2, 0) = 0.0;
  return rule;
}

QuadratureRule tensor_product(const QuadratureRule& rule, Index K) {
  if (rule.dim() != 1) throw DimensionError("tensor_product expects a one-dimensional rule");
  if (K < 1) throw ConfigError("tensor_product needs K >= 1");
  const Index n = rule.size();
  Index Q = 1;
  for (Index k = 0; k < K; ++k) Q *= n;
  QuadratureRule out;
  out.nodes.resize(Q, K);
  out.weights.resize(Q);
  for (Index q = 0; q < Q; ++q) {
    Index rem = q;
    double w = 1.0;
    for (Index k = K - 1; k >= 0; --k) {
      const Index idx = rem % n;
      rem /= n;
      out.nodes(q, k) = rule.nodes(idx, 0);
      w *= rule.weights(idx);
    }
    out.weights(q) = w;
  }
  return out;
}

QuadratureRule quadrature_rule(Index K, int nodes) {
  if (K < 1 || K > 3) throw ConfigError("quadrature EM supports 1 <= K <= 3");
  const QuadratureRule one = gauss_hermite_normal(nodes);
  return K == 1 ? one : tensor_product(one, K);
}

JmleResult fit_jmle(const ResponseDataset& data, const ModelSpec& spec, const JmleConfig& cfg) {
  spec.validate();
  require_analytic(spec, "JMLE");
  if (data.mode() != spec.mode) throw ConfigError("dataset response mode does not match the model spec");
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0))
    throw ConfigError("JMLE needs epochs >= 0, batch_size >= 1 and a positive learning rate");
  const auto start = std::chrono::steady_clock::now();
  const Index N = data.persons(), M = data.items(), K = spec.K, P = spec.item_dim();

  Rng rng(cfg.seed);
  Rng model_rng(cfg.seed);
  const GenerativeModel model(spec, model_rng);
  ParamStore store;
  store.add("jmle.ability", cfg.init_scale * standard_normal(rng, N, K));
  store.add("jmle.items", cfg.init_scale * standard_normal(rng, M, P));
  const AdamOptions adam{cfg.learning_rate};

  JmleResult res;
  IndexList order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batch = 0;
    for (Index begin = 0; begin < N; begin += cfg.batch_size, ++batch) {
      const Index end = std::min(N, begin + cfg.batch_size);
      IndexList cell_person, cell_item;
      std::vector<double> value;
      for (Index b = begin; b < end; ++b) {
        const Index i = order[static_cast<std::size_t>(b)];
        for (Index j = 0; j < M; ++j)
          if (data.observed(i, j)) {
            cell_person.push_back(i);
            cell_item.push_back(j);
            value.push_back(data.value(i, j));
          }
      }
      const Matrix r = Eigen::Map<const Matrix>(value.data(), static_cast<Index>(value.size()), 1);
      try {
        ad::Tape tape;
        TapeContext ctx(tape);
        auto ll = model.log_likelihood(ctx, ad::gather_rows(ctx.param(store, "jmle.ability"), cell_person),
                                       ad::gather_rows(ctx.param(store, "jmle.items"), cell_item), r);
        auto loss = ad::scale(ad::sum(ll), -1.0 / static_cast<double>(end - begin));
        tape.backward(loss);
        adam_step(store, tape.gradient(store), adam);
        total -= loss.scalar() * static_cast<double>(end - begin);
      } catch (const NumericalError& e) {
        throw TrainingError("JMLE diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                                std::to_string(batch + 1) + ": " + e.what(),
                            epoch + 1, batch + 1);
      }
    }
    res.trace.push_back(total / static_cast<double>(N));
  }
  res.estimates = {store.value("jmle.ability"), store.value("jmle.items")};
  res.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

namespace {

// log p(r = 1), log p(r = 0) for every (item, node): two M x Q tables.
std::pair<Matrix, Matrix> node_tables(const GenerativeModel& model, const Matrix& items, const QuadratureRule& rule) {
  const Index M = items.rows(), Q = rule.size();
  Matrix a(M * Q, rule.dim()), d(M * Q, items.cols());
  for (Index j = 0; j < M; ++j) {
    a.middleRows(j * Q, Q) = rule.nodes;
    d.middleRows(j * Q, Q) = items.row(j).replicate(Q, 1);
  }
  PlainContext ctx;
  const auto lp = model.log_probs(ctx, a, d);
  Matrix l1(M, Q), l0(M, Q);
  for (Index j = 0; j < M; ++j) {
    l1.row(j) = lp.log_p1.middleRows(j * Q, Q).transpose();
    l0.row(j) = lp.log_p0.middleRows(j * Q, Q).transpose();
  }
  return {l1, l0};
}

void require_em_compatible(const GenerativeModel& model, const ResponseDataset& data, const Matrix& items,
                           const QuadratureRule& rule) {
  require_analytic(model.spec(), "EM");
  if (data.mode() != ResponseMode::Binary) throw ConfigError("EM supports binary responses only");
  if (items.rows() != data.items() || items.cols() != model.spec().item_dim())
    throw DimensionError("item table must be M x P");
  if (rule.dim() != model.spec().K) throw DimensionError("quadrature dimension must equal K");
}

}  // namespace

EStep em_estep(const GenerativeModel& model, const Matrix& items, const QuadratureRule& rule,
               const ResponseDataset& data) {
  require_em_compatible(model, data, items, rule);
  const Index N = data.persons(), M = data.items(), Q = rule.size();
  const auto [l1, l0] = node_tables(model, items, rule);

  Matrix correct(N, M), wrong(N, M);
  for (Index i = 0; i < N; ++i)
    for (Index j = 0; j < M; ++j) {
      const bool o = data.observed(i, j);
      correct(i, j) = o && data.value(i, j) == 1.0 ? 1.0 : 0.0;
      wrong(i, j) = o && data.value(i, j) == 0.0 ? 1.0 : 0.0;
    }

  const Vector log_w = rule.weights.array().log();
  EStep e;
  Matrix joint = correct * l1 + wrong * l0;  // N x Q
  joint.rowwise() += log_w.transpose();
  e.node_weights.resize(N, Q);
  e.person_marginal.resize(N);
  for (Index i = 0; i < N; ++i) {
    const double lse = logsumexp(joint.row(i).data(), Q);
    e.person_marginal(i) = lse;
    e.node_weights.row(i) = (joint.row(i).array() - lse).exp();
  }
  e.marginal_loglik = e.person_marginal.sum();

  Vector m1(M), m0(M);
  for (Index j = 0; j < M; ++j) {
    Eigen::RowVectorXd t1 = l1.row(j) + log_w.transpose(), t0 = l0.row(j) + log_w.transpose();
    m1(j) = logsumexp(t1.data(), Q);
    m0(j) = logsumexp(t0.data(), Q);
  }
  e.cell_marginal = correct.array().rowwise() * m1.transpose().array();
  e.cell_marginal += (wrong.array().rowwise() * m0.transpose().array()).matrix();
  return e;
}

namespace {

struct ItemObjective {
  const GenerativeModel& model;
  const Matrix& nodes;
  Matrix n1;  // Q x 1 expected correct counts
  Matrix n0;

  double value(const Vector& x) const {
    PlainContext ctx;
    const Matrix d = Matrix(x.transpose()).replicate(nodes.rows(), 1);
    const auto lp = model.log_probs(ctx, nodes, d);
    return n1.col(0).dot(lp.log_p1.col(0)) + n0.col(0).dot(lp.log_p0.col(0));
  }

  Vector gradient(const Vector& x) const {
    ad::Tape tape;
    TapeContext ctx(tape);
    auto row = tape.variable(Matrix(x.transpose()));
    auto d = ad::matmul(ctx.constant(Matrix::Ones(nodes.rows(), 1)), row);
    auto lp = model.log_probs(ctx, ctx.constant(nodes), d);
    auto f = ad::add(ad::sum(ad::mul(ctx.constant(n1), lp.log_p1)), ad::sum(ad::mul(ctx.constant(n0), lp.log_p0)));
    tape.backward(f);
    return tape.gradient(row).row(0).transpose();
  }
};

struct Maximized {
  Vector x;
  bool converged = false;
};

// Damped Newton ascent in the box [-bound, bound]^P with a finite-difference Hessian.
Maximized maximize_item(const ItemObjective& obj, const Vector& x0, const EmConfig& cfg, double scale) {
  const Index P = x0.size();
  Vector x = x0.cwiseMax(-cfg.bound).cwiseMin(cfg.bound);
  double fx = obj.value(x);
  const double gtol = cfg.newton_tol * std::max(1.0, scale);
  for (int it = 0; it < cfg.newton_cap; ++it) {
    const Vector g = obj.gradient(x);
    std::vector<bool> active(static_cast<std::size_t>(P));
    Vector pg = g;
    for (Index c = 0; c < P; ++c) {
      const bool at_hi = x(c) >= cfg.bound && g(c) > 0.0;
      const bool at_lo = x(c) <= -cfg.bound && g(c) < 0.0;
      active[static_cast<std::size_t>(c)] = at_hi || at_lo;
      if (at_hi || at_lo) pg(c) = 0.0;
    }
    if (pg.lpNorm<Eigen::Infinity>() <= gtol) return {x, true};

    Eigen::MatrixXd H(P, P);
    for (Index c = 0; c < P; ++c) {
      const double h = 1e-5 * std::max(1.0, std::abs(x(c)));
      Vector xp = x, xm = x;
      xp(c) += h;
      xm(c) -= h;
      H.col(c) = (obj.gradient(xp) - obj.gradient(xm)) / (2.0 * h);
    }
    H = 0.5 * (H + H.transpose()).eval();
    Eigen::MatrixXd A = -H;
    for (Index c = 0; c < P; ++c)
      if (active[static_cast<std::size_t>(c)]) {
        A.row(c).setZero();
        A.col(c).setZero();
        A(c, c) = 1.0;
      }

    bool moved = false;
    double lambda = 0.0;
    const double diag = std::max(1e-12, A.diagonal().cwiseAbs().maxCoeff());
    for (int attempt = 0; attempt < 30 && !moved; ++attempt) {
      Eigen::MatrixXd D = A;
      D.diagonal().array() += lambda;
      Eigen::LLT<Eigen::MatrixXd> llt(D);
      if (llt.info() == Eigen::Success) {
        const Vector step = llt.solve(pg);
        for (double t = 1.0; t > 1e-10; t *= 0.5) {
          const Vector xn = (x + t * step).cwiseMax(-cfg.bound).cwiseMin(cfg.bound);
          const double fn = obj.value(xn);
          if (fn > fx) {
            x = xn;
            fx = fn;
            moved = true;
            break;
          }
        }
      }
      lambda = lambda == 0.0 ? 1e-6 * diag : lambda * 10.0;
    }
    if (!moved) return {x, pg.lpNorm<Eigen::Infinity>() <= 1e3 * gtol};
  }
  return {x, false};
}

}  // namespace

MStep em_mstep(const GenerativeModel& model, const ResponseDataset& data, const EStep& estep,
               const QuadratureRule& rule, const Matrix& items, const EmConfig& cfg) {
  require_em_compatible(model, data, items, rule);
  const Index N = data.persons(), M = data.items(), Q = rule.size();
  if (estep.node_weights.rows() != N || estep.node_weights.cols() != Q)
    throw DimensionError("E-step weights do not match the dataset and rule");

  Matrix correct(M, N), wrong(M, N);
  for (Index i = 0; i < N; ++i)
    for (Index j = 0; j < M; ++j) {
      const bool o = data.observed(i, j);
      correct(j, i) = o && data.value(i, j) == 1.0 ? 1.0 : 0.0;
      wrong(j, i) = o && data.value(i, j) == 0.0 ? 1.0 : 0.0;
    }
  const Matrix n1 = correct * estep.node_weights;  // M x Q
  const Matrix n0 = wrong * estep.node_weights;

  MStep out;
  out.items = items;
  out.capped.assign(static_cast<std::size_t>(M), false);
  out.unconverged.assign(static_cast<std::size_t>(M), false);
  for (Index j = 0; j < M; ++j) {
    ItemObjective obj{model, rule.nodes, n1.row(j).transpose(), n0.row(j).transpose()};
    const double count = n1.row(j).sum() + n0.row(j).sum();
    if (count <= 0.0) continue;
    const Vector x0 = items.row(j).transpose();
    const Maximized r = maximize_item(obj, x0, cfg, count);
    if (!r.converged) {
      out.unconverged[static_cast<std::size_t>(j)] = true;
      continue;
    }
    out.items.row(j) = r.x.transpose();
    out.capped[static_cast<std::size_t>(j)] = (r.x.cwiseAbs().array() >= cfg.bound).any();
  }
  return out;
}

Matrix em_initial_items(const ResponseDataset& data, const ModelSpec& spec) {
  require_analytic(spec, "EM");
  const ItemLayout l = spec.layout();
  Matrix items = Matrix::Zero(data.items(), l.dim);
  for (Index j = 0; j < data.items(); ++j) {
    double n = 0.0, s = 0.0;
    for (Index i = 0; i < data.persons(); ++i)
      if (data.observed(i, j)) {
        n += 1.0;
        s += data.value(i, j);
      }
    const double p = std::clamp(n > 0.0 ? s / n : 0.5, 0.01, 0.99);
    if (l.k_count) items.row(j).segment(l.k_offset, l.k_count).setOnes();
    items(j, l.d_index) = spec.family == Family::IDL ? std::sqrt(-2.0 * std::log(p)) : std::log(p / (1.0 - p));
    if (l.g_index >= 0) items(j, l.g_index) = -2.0;
    if (l.b_index >= 0) items(j, l.b_index) = 0.0;
  }
  return items;
}

EmResult em_fit(const ResponseDataset& data, const ModelSpec& spec, const EmConfig& cfg) {
  spec.validate();
  if (data.mode() != spec.mode) throw ConfigError("dataset response mode does not match the model spec");
  if (cfg.max_iters < 0 || !(cfg.tol >= 0.0) || !(cfg.bound > 0.0)) throw ConfigError("invalid EM settings");
  const auto start = std::chrono::steady_clock::now();
  Rng unused(0);
  const GenerativeModel model(spec, unused);
  const QuadratureRule rule = quadrature_rule(spec.K, cfg.nodes);

  EmResult res;
  Matrix items = em_initial_items(data, spec);
  res.flagged.assign(static_cast<std::size_t>(data.items()), false);
  EStep e = em_estep(model, items, rule, data);
  for (int it = 0; it < cfg.max_iters; ++it) {
    res.trace.push_back(e.marginal_loglik);
    const MStep m = em_mstep(model, data, e, rule, items, cfg);
    items = m.items;
    for (Index j = 0; j < data.items(); ++j) res.flagged[static_cast<std::size_t>(j)] = m.flagged(j);
    const double previous = e.marginal_loglik;
    e = em_estep(model, items, rule, data);
    res.iterations = it + 1;
    if (e.marginal_loglik - previous < cfg.tol) {
      res.converged = true;
      break;
    }
  }
  res.trace.push_back(e.marginal_loglik);
  res.estimates = {e.node_weights * rule.nodes, items};
  res.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace vibo
