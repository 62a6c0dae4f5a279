#include "vibo/irt_models.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

namespace vibo {

namespace {

const std::map<Family, std::string>& family_names() {
  static const std::map<Family, std::string> names{
      {Family::OnePL, "1pl"}, {Family::TwoPL, "2pl"}, {Family::ThreePL, "3pl"},
      {Family::MIRT, "mirt"}, {Family::LPE, "lpe"},   {Family::IDL, "idl"},
      {Family::Link, "link"}, {Family::Deep, "deep"}, {Family::Residual, "residual"}};
  return names;
}

constexpr double kLogSqrt2PiSigma = 0.91893853320467274 + -1.1512925464970229;  // log(sqrt(2 pi) * sigma)

}  // namespace

std::string to_string(Family f) { return family_names().at(f); }

std::string to_string(ResponseMode m) { return m == ResponseMode::Binary ? "binary" : "continuous"; }

Family family_from_string(const std::string& s) {
  for (const auto& [f, name] : family_names())
    if (name == s) return f;
  if (s == "2pl-mirt" || s == "mirt2pl") return Family::MIRT;
  throw ConfigError("unknown model family '" + s + "'");
}

ResponseMode response_mode_from_string(const std::string& s) {
  if (s == "binary") return ResponseMode::Binary;
  if (s == "continuous") return ResponseMode::Continuous;
  throw ConfigError("unknown response mode '" + s + "'");
}

ItemLayout ModelSpec::layout() const {
  ItemLayout l;
  switch (family) {
    case Family::OnePL:
      l.dim = 1;
      l.d_index = 0;
      break;
    case Family::Deep:
      l.dim = K;
      l.e_offset = 0;
      break;
    case Family::ThreePL:
    case Family::LPE:
      l.dim = K + 2;
      l.k_offset = 0;
      l.k_count = K;
      l.d_index = K;
      (family == Family::ThreePL ? l.g_index : l.b_index) = K + 1;
      break;
    default:
      l.dim = K + 1;
      l.k_offset = 0;
      l.k_count = K;
      l.d_index = K;
  }
  return l;
}

bool ModelSpec::uses_networks() const {
  return family == Family::Link || family == Family::Deep || family == Family::Residual;
}

void ModelSpec::validate() const {
  if (K < 1) throw ConfigError("ability dimension K must be at least 1");
  if (uses_networks() && (hidden_width < 1 || hidden_layers < 1))
    throw ConfigError("network width and depth must be positive");
}

nlohmann::json ModelSpec::to_json() const {
  return {{"family", to_string(family)},
          {"K", K},
          {"mode", to_string(mode)},
          {"hidden_width", hidden_width},
          {"hidden_layers", hidden_layers}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.family = family_from_string(j.at("family").get<std::string>());
  s.K = j.at("K").get<Index>();
  s.mode = response_mode_from_string(j.value("mode", std::string("binary")));
  s.hidden_width = j.value("hidden_width", Index{64});
  s.hidden_layers = j.value("hidden_layers", Index{3});
  s.validate();
  return s;
}

ItemParams ItemParams::from_unconstrained(const ModelSpec& spec, const Vector& row) {
  const ItemLayout l = spec.layout();
  if (row.size() != l.dim) throw DimensionError("item row has " + std::to_string(row.size()) + " entries, expected " +
                                                std::to_string(l.dim));
  ItemParams p;
  if (l.e_offset >= 0) {
    p.e = row.segment(l.e_offset, spec.K);
    return p;
  }
  p.k = l.k_count ? Vector(row.segment(l.k_offset, l.k_count)) : Vector::Ones(spec.K);
  p.d = row(l.d_index);
  if (l.g_index >= 0) p.g = ad::sigmoid(row(l.g_index));
  if (l.b_index >= 0) p.b = std::exp(row(l.b_index));
  return p;
}

Vector ItemParams::to_unconstrained(const ModelSpec& spec) const {
  const ItemLayout l = spec.layout();
  Vector row = Vector::Zero(l.dim);
  if (l.e_offset >= 0) {
    require(e.size() == spec.K, "deep item embedding must have K entries");
    row.segment(l.e_offset, spec.K) = e;
    return row;
  }
  if (l.k_count) {
    require(k.size() == spec.K, "discrimination must have K entries");
    row.segment(l.k_offset, l.k_count) = k;
  }
  row(l.d_index) = d;
  if (l.g_index >= 0) {
    const double gv = g.value_or(0.0);
    if (!(gv > 0.0 && gv < 1.0)) throw DomainError("guessing parameter must lie strictly inside (0, 1)");
    row(l.g_index) = std::log(gv) - std::log1p(-gv);
  }
  if (l.b_index >= 0) {
    const double bv = b.value_or(1.0);
    if (!(bv > 0.0)) throw DomainError("LPE exponent must be positive");
    row(l.b_index) = std::log(bv);
  }
  return row;
}

GenerativeModel::GenerativeModel(ModelSpec spec, Rng& rng) : spec_(std::move(spec)) {
  spec_.validate();
  build_networks();
  switch (spec_.family) {
    case Family::Link:
      link_.initialize(theta_, rng);
      break;
    case Family::Deep:
    case Family::Residual:
      ability_net_.initialize(theta_, rng);
      item_net_.initialize(theta_, rng);
      head_.initialize(theta_, rng);
      if (spec_.family == Family::Residual) head_.zero_output_layer(theta_);
      break;
    default:
      break;
  }
}

void GenerativeModel::build_networks() {
  const Index H = spec_.hidden_width, L = spec_.hidden_layers;
  if (spec_.family == Family::Link) link_ = Mlp::with_hidden("link", 1, H, L, 1);
  if (spec_.family == Family::Deep || spec_.family == Family::Residual) {
    ability_net_ = Mlp::with_hidden("deep.ability", spec_.K, H, L, H);
    item_net_ = Mlp::with_hidden("deep.item", spec_.item_dim(), H, L, H);
    head_ = Mlp::with_hidden("deep.head", 2 * H, H, L, 1);
  }
}

template <class Ctx>
typename Ctx::Value GenerativeModel::deep_logit(Ctx& ctx, const typename Ctx::Value& abilities,
                                                const typename Ctx::Value& item_input) const {
  auto ha = ability_net_.forward(ctx, theta_, abilities);
  auto he = item_net_.forward(ctx, theta_, item_input);
  return head_.forward(ctx, theta_, ad::concat_cols(ha, he));
}

template <class Ctx>
LogProbs<typename Ctx::Value> GenerativeModel::log_probs(Ctx& ctx, const typename Ctx::Value& a,
                                                         const typename Ctx::Value& items) const {
  using V = typename Ctx::Value;
  const ItemLayout l = spec_.layout();
  if (a.cols() != spec_.K) throw DimensionError("abilities must have K columns");
  if (items.cols() != l.dim) throw DimensionError("item rows must have P columns");
  if (a.rows() != items.rows()) throw DimensionError("abilities and items must have matching rows");

  auto linear = [&]() -> V {
    V d = ad::slice_cols(items, l.d_index, 1);
    if (l.k_count == 0) return ad::add(ad::rowsum(a), d);
    return ad::add(ad::rowsum(ad::mul(a, ad::slice_cols(items, l.k_offset, l.k_count))), d);
  };
  auto logistic = [](const V& z) { return LogProbs<V>{ad::log_sigmoid(z), ad::log_sigmoid(ad::neg(z))}; };
  auto from_log_p1 = [](const V& lp1) {
    return LogProbs<V>{lp1, ad::log1mexp(ad::clamp_max(lp1, kLogProbCeiling))};
  };

  switch (spec_.family) {
    case Family::OnePL:
    case Family::TwoPL:
    case Family::MIRT:
      return logistic(linear());
    case Family::ThreePL: {
      V z = linear();
      V g_raw = ad::slice_cols(items, l.g_index, 1);
      V log_g = ad::log_sigmoid(g_raw);
      V log_1mg = ad::log_sigmoid(ad::neg(g_raw));
      return {ad::logaddexp(log_g, ad::add(log_1mg, ad::log_sigmoid(z))),
              ad::add(log_1mg, ad::log_sigmoid(ad::neg(z)))};
    }
    case Family::LPE: {
      V b = ad::exp(ad::slice_cols(items, l.b_index, 1));
      return from_log_p1(ad::mul(b, ad::log_sigmoid(linear())));
    }
    case Family::IDL: {
      V u = linear();
      return from_log_p1(ad::scale(ad::square(u), -0.5));
    }
    case Family::Link:
      return logistic(link_.forward(ctx, theta_, ad::neg(linear())));
    case Family::Deep:
      return logistic(deep_logit(ctx, a, items));
    case Family::Residual:
      return logistic(ad::sub(linear(), deep_logit(ctx, a, items)));
  }
  throw ConfigError("unhandled model family");
}

template <class Ctx>
typename Ctx::Value GenerativeModel::log_likelihood(Ctx& ctx, const typename Ctx::Value& a,
                                                    const typename Ctx::Value& items,
                                                    const Matrix& responses) const {
  if (responses.rows() != a.rows() || responses.cols() != 1)
    throw DimensionError("responses must be an R x 1 column matching the abilities");
  auto lp = log_probs(ctx, a, items);
  if (spec_.mode == ResponseMode::Binary) {
    auto r = ctx.constant(responses);
    auto not_r = ctx.constant(Matrix(1.0 - responses.array()));
    return ad::add(ad::mul(r, lp.log_p1), ad::mul(not_r, lp.log_p0));
  }
  constexpr double inv_sigma = 1.0 / kContinuousSigma;
  auto p = ad::exp(lp.log_p1);
  auto resid = ad::sub(ctx.constant(responses), p);
  auto quad = ad::scale(ad::square(resid), -0.5 * inv_sigma * inv_sigma);
  auto upper = ad::normal_cdf(ad::scale(ad::add_scalar(ad::neg(p), 1.0), inv_sigma));
  auto lower = ad::normal_cdf(ad::scale(ad::neg(p), inv_sigma));
  auto log_z = ad::log(ad::sub(upper, lower));
  return ad::add_scalar(ad::sub(quad, log_z), -kLogSqrt2PiSigma);
}

template LogProbs<Matrix> GenerativeModel::log_probs<PlainContext>(PlainContext&, const Matrix&,
                                                                   const Matrix&) const;
template LogProbs<ad::Var> GenerativeModel::log_probs<TapeContext>(TapeContext&, const ad::Var&,
                                                                   const ad::Var&) const;
template Matrix GenerativeModel::log_likelihood<PlainContext>(PlainContext&, const Matrix&, const Matrix&,
                                                              const Matrix&) const;
template ad::Var GenerativeModel::log_likelihood<TapeContext>(TapeContext&, const ad::Var&, const ad::Var&,
                                                              const Matrix&) const;

Matrix GenerativeModel::prob(const Matrix& abilities, const Matrix& items) const {
  PlainContext ctx;
  return log_probs(ctx, abilities, items).log_p1.array().exp();
}

nlohmann::json GenerativeModel::to_json() const { return {{"spec", spec_.to_json()}, {"theta", theta_.to_json()}}; }

GenerativeModel GenerativeModel::from_json(const nlohmann::json& j) {
  GenerativeModel m;
  m.spec_ = ModelSpec::from_json(j.at("spec"));
  m.build_networks();
  m.theta_ = ParamStore::from_json(j.at("theta"));
  return m;
}

double response_prob(const GenerativeModel& model, const Vector& ability, const ItemParams& item) {
  const ModelSpec& s = model.spec();
  if (ability.size() != s.K) throw DimensionError("ability must have K entries");
  if (!ability.allFinite() || !std::isfinite(item.d) || (item.k.size() > 0 && !item.k.allFinite()) ||
      (item.e.size() > 0 && !item.e.allFinite()))
    throw DomainError("response_prob needs finite inputs");
  if (s.family == Family::Deep) return deep_response_prob(model, ability, item.e);
  const Vector k = s.family == Family::OnePL ? Vector::Ones(s.K) : item.k;
  if (k.size() != s.K) throw DimensionError("discrimination must have K entries");
  const double z = k.dot(ability) + item.d;
  switch (s.family) {
    case Family::OnePL:
    case Family::TwoPL:
    case Family::MIRT:
      return ad::sigmoid(z);
    case Family::ThreePL: {
      const double g = item.g.value_or(0.0);
      if (g < 0.0 || g > 1.0) throw DomainError("guessing parameter must lie in [0, 1]");
      return g + (1.0 - g) * ad::sigmoid(z);
    }
    case Family::LPE: {
      const double b = item.b.value_or(1.0);
      if (!(b > 0.0)) throw DomainError("LPE exponent must be positive");
      return std::pow(ad::sigmoid(z), b);
    }
    case Family::IDL:
      return std::exp(-0.5 * z * z);
    case Family::Link: {
      Vector u(1);
      u(0) = -z;
      return ad::sigmoid(model.link_net().forward(model.theta(), u)(0));
    }
    case Family::Residual: {
      Vector row(s.K + 1);
      row << k, item.d;
      Vector ha = model.ability_net().forward(model.theta(), ability);
      Vector he = model.item_net().forward(model.theta(), row);
      Vector joint(ha.size() + he.size());
      joint << ha, he;
      return ad::sigmoid(z - model.head_net().forward(model.theta(), joint)(0));
    }
    case Family::Deep:
      break;
  }
  throw ConfigError("unhandled model family");
}

double deep_response_prob(const GenerativeModel& model, const Vector& ability, const Vector& embedding) {
  if (model.spec().family != Family::Deep) throw ConfigError("deep_response_prob needs a deep model");
  if (embedding.size() != model.spec().K) throw DimensionError("embedding must have K entries");
  Vector ha = model.ability_net().forward(model.theta(), ability);
  Vector he = model.item_net().forward(model.theta(), embedding);
  Vector joint(ha.size() + he.size());
  joint << ha, he;
  return ad::sigmoid(model.head_net().forward(model.theta(), joint)(0));
}

double truncated_normal_logpdf(double r, double p) {
  if (r < 0.0 || r > 1.0) return -std::numeric_limits<double>::infinity();
  constexpr double inv_sigma = 1.0 / kContinuousSigma;
  const double z = ad::normal_cdf((1.0 - p) * inv_sigma) - ad::normal_cdf(-p * inv_sigma);
  const double t = (r - p) * inv_sigma;
  return -0.5 * t * t - kLogSqrt2PiSigma - std::log(z);
}

double response_loglik(const GenerativeModel& model, const Vector& ability, const ItemParams& item, double r) {
  const double p = response_prob(model, ability, item);
  if (model.spec().mode == ResponseMode::Continuous) {
    if (!(r >= 0.0 && r <= 1.0)) throw DomainError("continuous responses must lie in [0, 1]");
    return truncated_normal_logpdf(r, p);
  }
  if (r != 0.0 && r != 1.0) throw DomainError("binary responses must be 0 or 1");
  return r == 1.0 ? std::log(p) : std::log1p(-p);
}

std::string item_params_csv(const ModelSpec& spec, const Matrix& items, const std::vector<std::string>& item_ids) {
  if (items.cols() != spec.item_dim()) throw DimensionError("item table has the wrong number of columns");
  if (!item_ids.empty() && static_cast<Index>(item_ids.size()) != items.rows())
    throw DimensionError("item id count does not match the item table");
  std::ostringstream out;
  out << std::setprecision(17) << "item_id,family,d";
  for (Index k = 0; k < spec.K; ++k) out << ",k_" << (k + 1);
  out << ",g,b\n";
  for (Index j = 0; j < items.rows(); ++j) {
    const ItemParams p = ItemParams::from_unconstrained(spec, items.row(j).transpose());
    out << (item_ids.empty() ? "item_" + std::to_string(j) : item_ids[static_cast<std::size_t>(j)]) << ','
        << to_string(spec.family) << ',';
    if (spec.family != Family::Deep) out << p.d;
    const Vector& k = spec.family == Family::Deep ? p.e : p.k;
    for (Index c = 0; c < spec.K; ++c) out << ',' << k(c);
    out << ',';
    if (p.g) out << *p.g;
    out << ',';
    if (p.b) out << *p.b;
    out << '\n';
  }
  return out.str();
}

}  // namespace vibo
