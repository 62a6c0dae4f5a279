#include "vibo/posterior.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace vibo {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

Matrix row_of(const Vector& v) { return v.transpose(); }

}  // namespace

DiagGaussian::DiagGaussian(Vector m, Vector lv) : mu(std::move(m)), log_var(std::move(lv)) { validate(); }

DiagGaussian DiagGaussian::standard(Index dim) { return DiagGaussian(Vector::Zero(dim), Vector::Zero(dim)); }

void DiagGaussian::validate() const {
  if (mu.size() != log_var.size()) throw DimensionError("gaussian mean and log-variance lengths differ");
  if (!mu.allFinite() || !log_var.allFinite()) throw NumericalError("gaussian parameters must be finite");
}

DiagGaussian fuse_product(const std::vector<DiagGaussian>& experts) {
  if (experts.empty()) throw DimensionError("fuse_product needs at least one expert");
  const Index D = experts.front().dim();
  Vector precision = Vector::Zero(D), weighted = Vector::Zero(D);
  for (const auto& e : experts) {
    if (e.dim() != D) throw DimensionError("experts have different dimensions");
    const Vector p = (-e.log_var.array()).exp();
    precision += p;
    weighted += e.mu.cwiseProduct(p);
  }
  return DiagGaussian(weighted.cwiseQuotient(precision), -precision.array().log().matrix());
}

DiagGaussian fuse_mean(const std::vector<DiagGaussian>& components) {
  if (components.empty()) throw DimensionError("fuse_mean needs at least one component");
  const Index D = components.front().dim();
  const double n = static_cast<double>(components.size());
  Vector mean = Vector::Zero(D);
  for (const auto& c : components) {
    if (c.dim() != D) throw DimensionError("components have different dimensions");
    mean += c.mu / n;
  }
  Vector var = Vector::Zero(D);
  for (const auto& c : components) var += (c.var().array() + (c.mu - mean).array().square()).matrix() / n;
  return DiagGaussian(mean, var.array().log().matrix());
}

Vector reparam_sample(const DiagGaussian& q, const Vector& eps) {
  if (eps.size() != q.dim()) throw DimensionError("noise length must match the gaussian dimension");
  return q.mu + eps.cwiseProduct((0.5 * q.log_var.array()).exp().matrix());
}

double kl_diag_gaussians(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.dim() != p.dim()) throw DimensionError("kl between gaussians of different dimensions");
  const auto dv = (q.log_var - p.log_var).array();
  const auto dm = (q.mu - p.mu).array();
  return 0.5 * (dv.exp() + dm.square() * (-p.log_var.array()).exp() - 1.0 - dv).sum();
}

double log_density(const DiagGaussian& q, const Vector& x) {
  if (x.size() != q.dim()) throw DimensionError("point dimension must match the gaussian");
  const auto t = (x - q.mu).array();
  return -0.5 * (t.square() * (-q.log_var.array()).exp() + q.log_var.array() + kLog2Pi).sum();
}

template <class Ctx>
typename Ctx::Value kl_to_standard_normal(Ctx&, const typename Ctx::Value& mu, const typename Ctx::Value& log_var) {
  auto t = ad::sub(ad::add(ad::square(mu), ad::exp(log_var)), log_var);
  return ad::scale(ad::add_scalar(ad::rowsum(t), -static_cast<double>(mu.cols())), 0.5);
}

template <class Ctx>
typename Ctx::Value gaussian_logpdf(Ctx&, const typename Ctx::Value& x, const typename Ctx::Value& mu,
                                    const typename Ctx::Value& log_var) {
  auto t = ad::mul(ad::square(ad::sub(x, mu)), ad::exp(ad::neg(log_var)));
  return ad::scale(ad::add_scalar(ad::rowsum(ad::add(t, log_var)), kLog2Pi * static_cast<double>(x.cols())), -0.5);
}

template <class Ctx>
typename Ctx::Value standard_normal_logpdf(Ctx&, const typename Ctx::Value& x) {
  return ad::scale(ad::add_scalar(ad::rowsum(ad::square(x)), kLog2Pi * static_cast<double>(x.cols())), -0.5);
}

template <class Ctx>
typename Ctx::Value reparameterize(Ctx& ctx, const GaussianRows<typename Ctx::Value>& q, const Matrix& eps) {
  if (eps.rows() != q.mu.rows() || eps.cols() != q.mu.cols()) throw DimensionError("noise shape must match the mean");
  return ad::add(q.mu, ad::mul(ctx.constant(eps), ad::exp(ad::scale(q.log_var, 0.5))));
}

template <class Ctx>
GaussianRows<typename Ctx::Value> product_of_experts(Ctx& ctx, const GaussianRows<typename Ctx::Value>& experts,
                                                     const IndexList& segment, Index segments,
                                                     const DiagGaussian& prior) {
  if (experts.mu.cols() != prior.dim()) throw DimensionError("experts and prior differ in dimension");
  const Vector prior_precision = (-prior.log_var.array()).exp();
  auto precision = ad::exp(ad::neg(experts.log_var));
  auto total = ad::add_row(ad::segment_sum(precision, segment, segments), ctx.constant(row_of(prior_precision)));
  auto weighted = ad::add_row(ad::segment_sum(ad::mul(experts.mu, precision), segment, segments),
                              ctx.constant(row_of(prior.mu.cwiseProduct(prior_precision))));
  return {ad::div(weighted, total), ad::neg(ad::log(total))};
}

template <class Ctx>
GaussianRows<typename Ctx::Value> mean_of_experts(Ctx& ctx, const GaussianRows<typename Ctx::Value>& experts,
                                                  const IndexList& segment, Index segments, Index components,
                                                  const DiagGaussian& prior) {
  if (experts.mu.cols() != prior.dim()) throw DimensionError("experts and prior differ in dimension");
  Matrix fill = Matrix::Constant(segments, 1, static_cast<double>(components));
  for (Index s : segment) fill(s, 0) -= 1.0;
  if ((fill.array() < 0.0).any()) throw DimensionError("more experts than mixture components in a segment");
  const double inv = 1.0 / static_cast<double>(components);
  const Matrix prior_mu = row_of(prior.mu);
  auto fill_c = ctx.constant(fill);

  auto mean = ad::scale(ad::add(ad::segment_sum(experts.mu, segment, segments), ctx.constant(fill * prior_mu)), inv);
  auto within = ad::scale(ad::add(ad::segment_sum(ad::exp(experts.log_var), segment, segments),
                                  ctx.constant(fill * row_of(prior.var()))),
                          inv);
  auto spread = ad::segment_sum(ad::square(ad::sub(experts.mu, ad::gather_rows(mean, segment))), segment, segments);
  auto prior_spread = ad::mul_col(ad::square(ad::add_row(ad::neg(mean), ctx.constant(prior_mu))), fill_c);
  auto between = ad::scale(ad::add(spread, prior_spread), inv);
  return {mean, ad::log(ad::add(within, between))};
}

#define VIBO_INSTANTIATE_POSTERIOR(Ctx)                                                                        \
  template Ctx::Value kl_to_standard_normal<Ctx>(Ctx&, const Ctx::Value&, const Ctx::Value&);                 \
  template Ctx::Value gaussian_logpdf<Ctx>(Ctx&, const Ctx::Value&, const Ctx::Value&, const Ctx::Value&);     \
  template Ctx::Value standard_normal_logpdf<Ctx>(Ctx&, const Ctx::Value&);                                   \
  template Ctx::Value reparameterize<Ctx>(Ctx&, const GaussianRows<Ctx::Value>&, const Matrix&);              \
  template GaussianRows<Ctx::Value> product_of_experts<Ctx>(Ctx&, const GaussianRows<Ctx::Value>&,            \
                                                            const IndexList&, Index, const DiagGaussian&);    \
  template GaussianRows<Ctx::Value> mean_of_experts<Ctx>(Ctx&, const GaussianRows<Ctx::Value>&,               \
                                                         const IndexList&, Index, Index, const DiagGaussian&); \
  template GaussianRows<Ctx::Value> AbilityEncoder::experts<Ctx>(Ctx&, const ParamStore&, const Ctx::Value&,  \
                                                                 const Matrix&) const;                        \
  template std::pair<Ctx::Value, Ctx::Value> PlanarFlowStack::push<Ctx>(Ctx&, const ParamStore&,              \
                                                                        const Ctx::Value&) const;

AbilityEncoder::AbilityEncoder(std::string prefix, Index item_dim, Index K, bool uses_items, Index width,
                               Index layers)
    : net_(Mlp::with_hidden(std::move(prefix), (uses_items ? item_dim : 0) + 1, width, layers, 2 * K)),
      item_dim_(item_dim),
      K_(K),
      uses_items_(uses_items) {}

template <class Ctx>
GaussianRows<typename Ctx::Value> AbilityEncoder::experts(Ctx& ctx, const ParamStore& phi,
                                                          const typename Ctx::Value& items,
                                                          const Matrix& responses) const {
  if (responses.cols() != 1) throw DimensionError("encoder responses must be a column");
  auto r = ctx.constant(responses);
  typename Ctx::Value input = r;
  if (uses_items_) {
    if (items.cols() != item_dim_ || items.rows() != responses.rows())
      throw DimensionError("encoder item rows must be R x P");
    input = ad::concat_cols(items, r);
  }
  auto out = net_.forward(ctx, phi, input);
  return {ad::slice_cols(out, 0, K_), ad::slice_cols(out, K_, K_)};
}

namespace {

struct ObservedRows {
  IndexList items;
  Matrix responses;
};

ObservedRows observed_rows(const Matrix& items, const Vector& responses, const std::vector<bool>& observed) {
  if (responses.size() != items.rows() || static_cast<Index>(observed.size()) != items.rows())
    throw DimensionError("response row, mask and item samples must all have M entries");
  ObservedRows o;
  for (Index j = 0; j < items.rows(); ++j)
    if (observed[static_cast<std::size_t>(j)]) o.items.push_back(j);
  o.responses.resize(static_cast<Index>(o.items.size()), 1);
  for (std::size_t r = 0; r < o.items.size(); ++r) o.responses(static_cast<Index>(r), 0) = responses(o.items[r]);
  return o;
}

DiagGaussian single(const GaussianRows<Matrix>& g) {
  DiagGaussian out(g.mu.row(0).transpose(), g.log_var.row(0).transpose());
  return out;
}

}  // namespace

DiagGaussian encode_ability(const AbilityEncoder& enc, const ParamStore& phi, const Matrix& items,
                            const Vector& responses, const std::vector<bool>& observed, const DiagGaussian& prior) {
  if (prior.dim() != enc.K()) throw DimensionError("prior dimension must equal K");
  const ObservedRows o = observed_rows(items, responses, observed);
  if (o.items.empty()) return prior;
  PlainContext ctx;
  auto e = enc.experts(ctx, phi, ad::gather_rows(items, o.items), o.responses);
  if (!e.mu.allFinite() || !e.log_var.allFinite()) throw NumericalError("encoder produced a non-finite expert");
  return single(product_of_experts(ctx, e, IndexList(o.items.size(), 0), 1, prior));
}

DiagGaussian encode_ability_mean(const AbilityEncoder& enc, const ParamStore& phi, const Matrix& items,
                                 const Vector& responses, const std::vector<bool>& observed,
                                 const DiagGaussian& prior) {
  if (prior.dim() != enc.K()) throw DimensionError("prior dimension must equal K");
  const ObservedRows o = observed_rows(items, responses, observed);
  if (o.items.empty()) return prior;
  PlainContext ctx;
  auto e = enc.experts(ctx, phi, ad::gather_rows(items, o.items), o.responses);
  if (!e.mu.allFinite() || !e.log_var.allFinite()) throw NumericalError("encoder produced a non-finite expert");
  return single(mean_of_experts(ctx, e, IndexList(o.items.size(), 0), 1, items.rows(), prior));
}

GaussianTable::GaussianTable(std::string prefix, Index rows, Index dim)
    : prefix_(std::move(prefix)), rows_(rows), dim_(dim) {
  if (rows < 0 || dim < 1) throw ConfigError("gaussian table needs a positive dimension");
}

void GaussianTable::initialize(ParamStore& phi) const {
  phi.add(mu_name(), Matrix::Zero(rows_, dim_));
  phi.add(log_var_name(), Matrix::Zero(rows_, dim_));
}

DiagGaussian GaussianTable::row(const ParamStore& phi, Index r) const {
  if (r < 0 || r >= rows_) throw DimensionError("gaussian table row out of range");
  return DiagGaussian(phi.value(mu_name()).row(r).transpose(), phi.value(log_var_name()).row(r).transpose());
}

PlanarFlowStack::PlanarFlowStack(std::string prefix, Index dim, int count, Index block_rows)
    : prefix_(std::move(prefix)), dim_(dim), rows_(block_rows), count_(count) {
  if (dim < 1 || count < 0 || block_rows < 1)
    throw ConfigError("flow stack needs positive dimensions and a non-negative count");
}

void PlanarFlowStack::initialize(ParamStore& phi, Rng& rng) const {
  for (int k = 0; k < count_; ++k) {
    phi.add(u_name(k), 0.1 * standard_normal(rng, rows_, dim_));
    phi.add(w_name(k), 0.1 * standard_normal(rng, rows_, dim_));
    phi.add(b_name(k), Matrix::Zero(1, 1));
  }
}

// u_hat = u + (elu(w.u) - w.u) w / |w|^2, so w.u_hat = elu(w.u) > -1 and
// u_hat = u whenever w.u >= 0. Dot products run over the whole block.
template <class Ctx>
std::pair<typename Ctx::Value, typename Ctx::Value> PlanarFlowStack::push(Ctx& ctx, const ParamStore& phi,
                                                                          const typename Ctx::Value& z0) const {
  if (z0.cols() != dim_ || z0.rows() % rows_ != 0) throw DimensionError("flow input has the wrong dimension");
  const Index G = z0.rows() / rows_;
  IndexList rep(static_cast<std::size_t>(z0.rows())), owner(static_cast<std::size_t>(z0.rows()));
  for (Index r = 0; r < z0.rows(); ++r) {
    rep[static_cast<std::size_t>(r)] = r % rows_;
    owner[static_cast<std::size_t>(r)] = r / rows_;
  }
  const auto ones_r = ctx.constant(Matrix::Ones(rows_, 1));
  const auto ones_d = ctx.constant(Matrix::Ones(1, dim_));
  typename Ctx::Value z = z0;
  typename Ctx::Value logdet = ctx.constant(Matrix::Zero(G, 1));
  for (int k = 0; k < count_; ++k) {
    auto u = ctx.param(phi, u_name(k));
    auto w = ctx.param(phi, w_name(k));
    auto b = ctx.param(phi, b_name(k));
    auto wu = ad::sum(ad::mul(u, w));
    typename Ctx::Value uh = u;
    if (Ctx::value(w).squaredNorm() > 0.0) {
      auto coef = ad::div(ad::sub(ad::elu(wu), wu), ad::sum(ad::square(w)));
      uh = ad::add(u, ad::mul(ad::matmul(ad::matmul(ones_r, coef), ones_d), w));
    }
    auto proj = ad::segment_sum(ad::rowsum(ad::mul(z, ad::gather_rows(w, rep))), owner, G);
    auto h = ad::tanh(ad::add_row(proj, b));
    z = ad::add(z, ad::mul_col(ad::gather_rows(uh, rep), ad::gather_rows(h, owner)));
    auto det = ad::add_scalar(ad::matmul(ad::add_scalar(ad::neg(ad::square(h)), 1.0), ad::sum(ad::mul(uh, w))), 1.0);
    if (Ctx::value(det).cwiseAbs().minCoeff() < 1e-12)
      throw NumericalError("singular Jacobian in planar flow " + prefix_ + "[" + std::to_string(k) + "]");
    logdet = ad::add(logdet, ad::log(ad::mul(det, det)));
  }
  return {z, ad::scale(logdet, 0.5)};
}

VIBO_INSTANTIATE_POSTERIOR(PlainContext)
VIBO_INSTANTIATE_POSTERIOR(TapeContext)

namespace {

Matrix as_block(const Vector& v, Index rows, Index cols) {
  if (v.size() != rows * cols) throw DimensionError("flow input has the wrong dimension");
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

}  // namespace

std::pair<Vector, double> PlanarFlowStack::push(const ParamStore& phi, const Vector& z0, double base_logdensity) const {
  PlainContext ctx;
  auto [z, logdet] = push(ctx, phi, as_block(z0, rows_, dim_));
  return {flatten(z), base_logdensity - logdet(0, 0)};
}

Vector PlanarFlowStack::u_hat(const ParamStore& phi, int k) const {
  const Vector u = flatten(phi.value(u_name(k)));
  const Vector w = flatten(phi.value(w_name(k)));
  const double w2 = w.squaredNorm();
  if (w2 == 0.0) return u;
  const double wu = w.dot(u);
  return u + (ad::elu(wu) - wu) / w2 * w;
}

Vector PlanarFlowStack::invert(const ParamStore& phi, const Vector& zK) const {
  if (zK.size() != rows_ * dim_) throw DimensionError("flow input has the wrong dimension");
  Vector y = zK;
  for (int k = count_ - 1; k >= 0; --k) {
    const Vector uh = u_hat(phi, k);
    const Vector w = flatten(phi.value(w_name(k)));
    const double b = phi.value(b_name(k))(0, 0);
    // Solve alpha + c tanh(alpha + b) = w.y for alpha = w.z; monotone since c >= -1.
    const double c = w.dot(uh);
    const double target = w.dot(y);
    double lo = target - std::abs(c) - 1.0, hi = target + std::abs(c) + 1.0;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * (1.0 + std::abs(lo)); ++it) {
      const double mid = 0.5 * (lo + hi);
      (mid + c * std::tanh(mid + b) < target ? lo : hi) = mid;
    }
    const double alpha = 0.5 * (lo + hi);
    y = y - uh * std::tanh(alpha + b);
  }
  return y;
}

std::string gaussian_table_csv(const std::string& id_header, const std::vector<std::string>& ids, const Matrix& mu,
                               const std::optional<Matrix>& var) {
  if (var && (var->rows() != mu.rows() || var->cols() != mu.cols()))
    throw DimensionError("variance table must match the mean table");
  if (!ids.empty() && static_cast<Index>(ids.size()) != mu.rows()) throw DimensionError("id count mismatch");
  const std::string stem = id_header.substr(0, id_header.find('_'));
  std::ostringstream out;
  out << std::setprecision(17) << id_header;
  for (Index c = 0; c < mu.cols(); ++c) out << ",mu_" << (c + 1);
  for (Index c = 0; c < mu.cols(); ++c) out << ",var_" << (c + 1);
  out << '\n';
  for (Index r = 0; r < mu.rows(); ++r) {
    out << (ids.empty() ? stem + "_" + std::to_string(r) : ids[static_cast<std::size_t>(r)]);
    for (Index c = 0; c < mu.cols(); ++c) out << ',' << mu(r, c);
    for (Index c = 0; c < mu.cols(); ++c) {
      out << ',';
      if (var) out << (*var)(r, c);
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace vibo
