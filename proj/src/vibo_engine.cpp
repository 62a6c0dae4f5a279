#include "vibo/vibo_engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <set>

namespace vibo {

std::string to_string(PosteriorMode m) {
  switch (m) {
    case PosteriorMode::Product:
      return "product";
    case PosteriorMode::Mean:
      return "mean";
    case PosteriorMode::Independent:
      return "independent";
    case PosteriorMode::Unamortized:
      return "unamortized";
  }
  return "product";
}

PosteriorMode posterior_mode_from_string(const std::string& s) {
  for (auto m : {PosteriorMode::Product, PosteriorMode::Mean, PosteriorMode::Independent, PosteriorMode::Unamortized})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown posterior mode '" + s + "'");
}

void ViboConfig::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and non-negative");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (flows < 0) throw ConfigError("flows must be non-negative");
  if (samples < 1) throw ConfigError("samples must be positive");
  if (item_kl_weight && !(*item_kl_weight >= 0.0)) throw ConfigError("item_kl_weight must be non-negative");
  if (encoder_width < 1 || encoder_layers < 1) throw ConfigError("encoder width and depth must be positive");
  if (!std::isfinite(item_init_log_var)) throw ConfigError("item_init_log_var must be finite");
}

double ViboConfig::resolved_item_kl_weight(Index N) const {
  if (item_kl_weight) return *item_kl_weight;
  return 1.0 / static_cast<double>(std::max<Index>(N, 1));
}

nlohmann::json ViboConfig::to_json() const {
  nlohmann::json j{{"beta", beta},
                   {"epochs", epochs},
                   {"batch_size", batch_size},
                   {"learning_rate", learning_rate},
                   {"seed", seed},
                   {"posterior_mode", to_string(posterior_mode)},
                   {"flows", flows},
                   {"samples", samples},
                   {"shared_item_sample", shared_item_sample},
                   {"encoder_width", encoder_width},
                   {"encoder_layers", encoder_layers},
                   {"item_init_log_var", item_init_log_var}};
  j["item_kl_weight"] = item_kl_weight ? nlohmann::json(*item_kl_weight) : nlohmann::json(nullptr);
  return j;
}

ViboConfig ViboConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"beta",  "epochs",  "batch_size",     "learning_rate", "seed",
                                           "posterior_mode", "flows", "samples", "item_kl_weight",
                                           "encoder_width",  "encoder_layers", "shared_item_sample",
                                           "item_init_log_var"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown vibo setting '" + key + "'");
  ViboConfig c;
  c.beta = j.value("beta", c.beta);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.posterior_mode = posterior_mode_from_string(j.value("posterior_mode", std::string("product")));
  c.flows = j.value("flows", c.flows);
  c.samples = j.value("samples", c.samples);
  c.shared_item_sample = j.value("shared_item_sample", c.shared_item_sample);
  if (j.contains("item_kl_weight") && !j.at("item_kl_weight").is_null())
    c.item_kl_weight = j.at("item_kl_weight").get<double>();
  c.encoder_width = j.value("encoder_width", c.encoder_width);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.item_init_log_var = j.value("item_init_log_var", c.item_init_log_var);
  c.validate();
  return c;
}

VariationalPosterior::VariationalPosterior(const ModelSpec& spec, const ViboConfig& cfg, Index N, Index M, Rng& rng)
    : mode_(cfg.posterior_mode),
      flows_(cfg.flows),
      N_(N),
      M_(M),
      K_(spec.K),
      P_(spec.item_dim()),
      width_(cfg.encoder_width),
      layers_(cfg.encoder_layers) {
  build(width_, layers_);
  items_.initialize(phi_);
  phi_.mutable_value(items_.log_var_name()).setConstant(cfg.item_init_log_var);
  if (mode_ == PosteriorMode::Unamortized)
    abilities_.initialize(phi_);
  else
    encoder_.initialize(phi_, rng);
  if (flows_ > 0) {
    item_flows_.initialize(phi_, rng);
    ability_flows_.initialize(phi_, rng);
  }
}

void VariationalPosterior::build(Index width, Index layers) {
  items_ = GaussianTable("item", M_, P_);
  if (mode_ == PosteriorMode::Unamortized)
    abilities_ = GaussianTable("ability", N_, K_);
  else
    encoder_ = AbilityEncoder("encoder", P_, K_, mode_ != PosteriorMode::Independent, width, layers);
  if (flows_ > 0) {
    item_flows_ = PlanarFlowStack("flow.item", P_, flows_, M_);
    ability_flows_ = PlanarFlowStack("flow.ability", K_, flows_);
  }
}

nlohmann::json VariationalPosterior::to_json() const {
  return {{"mode", to_string(mode_)}, {"flows", flows_},           {"N", N_},
          {"M", M_},                  {"K", K_},                   {"P", P_},
          {"encoder_width", width_},  {"encoder_layers", layers_}, {"phi", phi_.to_json()}};
}

VariationalPosterior VariationalPosterior::from_json(const nlohmann::json& j) {
  VariationalPosterior v;
  v.mode_ = posterior_mode_from_string(j.at("mode").get<std::string>());
  v.flows_ = j.at("flows").get<int>();
  v.N_ = j.at("N").get<Index>();
  v.M_ = j.at("M").get<Index>();
  v.K_ = j.at("K").get<Index>();
  v.P_ = j.at("P").get<Index>();
  v.width_ = j.at("encoder_width").get<Index>();
  v.layers_ = j.at("encoder_layers").get<Index>();
  v.build(v.width_, v.layers_);
  v.phi_ = ParamStore::from_json(j.at("phi"));
  return v;
}

nlohmann::json ViboModel::to_json() const {
  return {{"generative", generative.to_json()}, {"posterior", posterior.to_json()}};
}

ViboModel ViboModel::from_json(const nlohmann::json& j) {
  return {GenerativeModel::from_json(j.at("generative")), VariationalPosterior::from_json(j.at("posterior"))};
}

ViboNoise draw_noise(Rng& rng, Index B, Index M, Index P, Index K, bool shared_items) {
  ViboNoise n;
  n.item_eps = standard_normal(rng, shared_items ? M : B * M, P);
  n.ability_eps = standard_normal(rng, B, K);
  return n;
}

template <class Ctx>
ViboRows<typename Ctx::Value> vibo_rows(Ctx& ctx, const ViboModel& model, const ResponseDataset& data,
                                        const IndexList& persons, const ViboNoise& noise, const ViboOptions& opt) {
  using V = typename Ctx::Value;
  const VariationalPosterior& post = model.posterior;
  const GenerativeModel& gen = model.generative;
  const ParamStore& phi = post.phi();
  const auto B = static_cast<Index>(persons.size());
  const Index M = post.items(), P = post.P(), K = post.K();

  if (data.items() != M) throw DimensionError("dataset has a different number of items than the posterior");
  if (data.mode() != gen.spec().mode) throw ConfigError("dataset response mode does not match the model");
  const Index G = noise.item_eps.rows() == M ? 1 : B;
  if (noise.item_eps.rows() != G * M || noise.item_eps.cols() != P)
    throw DimensionError("item noise must be (B*M) x P or M x P");
  if (noise.ability_eps.rows() != B || noise.ability_eps.cols() != K) throw DimensionError("ability noise must be B x K");
  for (Index i : persons)
    if (i < 0 || i >= data.persons()) throw DimensionError("person index out of range");
  if (post.mode() == PosteriorMode::Unamortized && data.persons() != post.persons())
    throw DimensionError("unamortized posterior was built for a different number of persons");

  const bool flows = post.flow_count() > 0;
  const bool sampled_kl = flows || opt.kl == KlEstimator::SingleSample;
  const bool binary = data.mode() == ResponseMode::Binary;

  // Observed cells, plus the distinct (item sample, response) pairs they use:
  // identical pairs produce identical encoder experts.
  IndexList obs_person, obs_unique, unique_noise;
  std::vector<double> unique_value;
  std::vector<Index> slot(binary ? static_cast<std::size_t>(2 * G * M) : 0, -1);
  for (Index b = 0; b < B; ++b) {
    const Index i = persons[static_cast<std::size_t>(b)];
    for (Index j = 0; j < M; ++j) {
      if (!data.observed(i, j)) continue;
      const Index row = G == 1 ? j : b * M + j;
      const double r = data.value(i, j);
      Index u = -1;
      if (binary) {
        Index& s = slot[static_cast<std::size_t>(2 * row + (r == 1.0 ? 1 : 0))];
        if (s < 0) {
          s = static_cast<Index>(unique_noise.size());
          unique_noise.push_back(row);
          unique_value.push_back(r);
        }
        u = s;
      } else {
        u = static_cast<Index>(unique_noise.size());
        unique_noise.push_back(row);
        unique_value.push_back(r);
      }
      obs_person.push_back(b);
      obs_unique.push_back(u);
    }
  }
  const auto U = static_cast<Index>(unique_value.size());
  const Matrix unique_r = Eigen::Map<const Matrix>(unique_value.data(), U, 1);
  Matrix responses(static_cast<Index>(obs_unique.size()), 1);
  for (std::size_t r = 0; r < obs_unique.size(); ++r)
    responses(static_cast<Index>(r), 0) = unique_value[static_cast<std::size_t>(obs_unique[r])];

  ViboRows<V> out;
  auto item_q = post.item_table().rows(ctx, phi);
  V items_unique;
  if (sampled_kl) {
    IndexList rep(static_cast<std::size_t>(G * M)), owner(static_cast<std::size_t>(G * M));
    for (Index r = 0; r < G * M; ++r) {
      rep[static_cast<std::size_t>(r)] = r % M;
      owner[static_cast<std::size_t>(r)] = r / M;
    }
    GaussianRows<V> q{ad::gather_rows(item_q.mu, rep), ad::gather_rows(item_q.log_var, rep)};
    V d = reparameterize(ctx, q, noise.item_eps);
    V log_q = gaussian_logpdf(ctx, d, q.mu, q.log_var);
    std::optional<V> bank_logdet;
    if (flows) {
      // One flow over each group's whole M x P bank.
      auto [pushed, logdet] = post.item_flows().push(ctx, phi, d);
      d = pushed;
      bank_logdet = logdet;
    }
    out.kl_item = ad::segment_sum(ad::sub(log_q, standard_normal_logpdf(ctx, d)), owner, G);
    if (bank_logdet) out.kl_item = ad::sub(out.kl_item, *bank_logdet);
    if (G == 1) out.kl_item = ad::matmul(ctx.constant(Matrix::Ones(B, 1)), out.kl_item);
    out.items = d;
    items_unique = ad::gather_rows(d, unique_noise);
  } else {
    IndexList unique_item(unique_noise.size());
    for (std::size_t u = 0; u < unique_noise.size(); ++u) unique_item[u] = unique_noise[u] % M;
    GaussianRows<V> q{ad::gather_rows(item_q.mu, unique_item), ad::gather_rows(item_q.log_var, unique_item)};
    items_unique = reparameterize(ctx, q, ad::gather_rows(noise.item_eps, unique_noise));
    auto bank = ad::sum(kl_to_standard_normal(ctx, item_q.mu, item_q.log_var));
    out.kl_item = ad::matmul(ctx.constant(Matrix::Ones(B, 1)), bank);
  }
  V items_obs = ad::gather_rows(items_unique, obs_unique);
  auto experts = [&]() {
    auto e = post.encoder().experts(ctx, phi, items_unique, unique_r);
    return GaussianRows<V>{ad::gather_rows(e.mu, obs_unique), ad::gather_rows(e.log_var, obs_unique)};
  };

  const DiagGaussian prior = DiagGaussian::standard(K);
  GaussianRows<V> qa;
  switch (post.mode()) {
    case PosteriorMode::Unamortized: {
      auto table = post.ability_table().rows(ctx, phi);
      qa = {ad::gather_rows(table.mu, persons), ad::gather_rows(table.log_var, persons)};
      break;
    }
    case PosteriorMode::Mean:
      qa = mean_of_experts(ctx, experts(), obs_person, B, M, prior);
      break;
    case PosteriorMode::Product:
    case PosteriorMode::Independent:
      qa = product_of_experts(ctx, experts(), obs_person, B, prior);
      break;
  }

  out.ability_mu = qa.mu;
  out.ability_log_var = qa.log_var;
  V a = reparameterize(ctx, qa, noise.ability_eps);
  if (sampled_kl) {
    V log_q = gaussian_logpdf(ctx, a, qa.mu, qa.log_var);
    if (flows) {
      auto [pushed, logdet] = post.ability_flows().push(ctx, phi, a);
      a = pushed;
      log_q = ad::sub(log_q, logdet);
    }
    out.kl_ability = ad::sub(log_q, standard_normal_logpdf(ctx, a));
  } else {
    out.kl_ability = kl_to_standard_normal(ctx, qa.mu, qa.log_var);
  }
  out.abilities = a;

  auto loglik = gen.log_likelihood(ctx, ad::gather_rows(a, obs_person), items_obs, responses);
  out.recon = ad::segment_sum(loglik, obs_person, B);
  auto penalty = ad::add(out.kl_ability, ad::scale(out.kl_item, opt.item_kl_weight));
  out.total = ad::sub(out.recon, ad::scale(penalty, opt.beta));
  return out;
}

template ViboRows<Matrix> vibo_rows<PlainContext>(PlainContext&, const ViboModel&, const ResponseDataset&,
                                                  const IndexList&, const ViboNoise&, const ViboOptions&);
template ViboRows<ad::Var> vibo_rows<TapeContext>(TapeContext&, const ViboModel&, const ResponseDataset&,
                                                  const IndexList&, const ViboNoise&, const ViboOptions&);

namespace {

void check_term(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericalError(std::string("non-finite ") + name + " term in the VIBO objective");
}

}  // namespace

ViboTerms vibo_value(const ViboModel& model, const ResponseDataset& data, Index person, Rng& rng, double beta,
                     double item_kl_weight) {
  const auto& post = model.posterior;
  const ViboNoise noise = draw_noise(rng, 1, post.items(), post.P(), post.K());
  PlainContext ctx;
  const auto rows = vibo_rows(ctx, model, data, {person}, noise, {beta, item_kl_weight, KlEstimator::ClosedForm});
  ViboTerms t{rows.total(0, 0), rows.recon(0, 0), rows.kl_ability(0, 0), rows.kl_item(0, 0)};
  check_term(t.recon, "reconstruction");
  check_term(t.kl_ability, "ability KL");
  check_term(t.kl_item, "item KL");
  check_term(t.total, "total");
  return t;
}

BatchGradient batch_gradient(const ViboModel& model, const ResponseDataset& data, const IndexList& persons,
                             const std::vector<ViboNoise>& noise, const ViboOptions& opt) {
  if (persons.empty()) throw DimensionError("batch_gradient needs at least one person");
  if (noise.empty()) throw DimensionError("batch_gradient needs at least one noise draw");
  ad::Tape tape;
  TapeContext ctx(tape);
  const double scale = 1.0 / static_cast<double>(persons.size() * noise.size());
  BatchGradient g;
  ad::Var total;
  for (const ViboNoise& n : noise) {
    auto rows = vibo_rows(ctx, model, data, persons, n, opt);
    g.mean.total += rows.total.value().sum() * scale;
    g.mean.recon += rows.recon.value().sum() * scale;
    g.mean.kl_ability += rows.kl_ability.value().sum() * scale;
    g.mean.kl_item += rows.kl_item.value().sum() * scale;
    auto s = ad::sum(rows.total);
    total = total.valid() ? ad::add(total, s) : s;
  }
  auto loss = ad::scale(total, -scale);
  g.loss = loss.scalar();
  tape.backward(loss);
  g.theta = tape.gradient(model.generative.theta());
  g.phi = tape.gradient(model.posterior.phi());
  return g;
}

FitResult fit(const ResponseDataset& data, const ModelSpec& spec, const ViboConfig& cfg) {
  cfg.validate();
  spec.validate();
  if (data.mode() != spec.mode) throw ConfigError("dataset response mode does not match the model spec");
  const auto start = std::chrono::steady_clock::now();
  const Index N = data.persons(), M = data.items();

  Rng rng(cfg.seed);
  FitResult res;
  res.config = cfg;
  res.model.generative = GenerativeModel(spec, rng);
  res.model.posterior = VariationalPosterior(spec, cfg, N, M, rng);

  const ViboOptions opt{cfg.beta, cfg.resolved_item_kl_weight(N), KlEstimator::ClosedForm};
  const AdamOptions adam{cfg.learning_rate};
  IndexList order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    EpochTrace tr;
    tr.epoch = epoch + 1;
    int batch = 0;
    for (Index begin = 0; begin < N; begin += cfg.batch_size, ++batch) {
      const Index end = std::min(N, begin + cfg.batch_size);
      const IndexList persons(order.begin() + begin, order.begin() + end);
      std::vector<ViboNoise> noise;
      for (int s = 0; s < cfg.samples; ++s)
        noise.push_back(draw_noise(rng, end - begin, M, res.model.posterior.P(), spec.K, cfg.shared_item_sample));
      try {
        const BatchGradient g = batch_gradient(res.model, data, persons, noise, opt);
        if (!std::isfinite(g.loss)) throw NumericalError("non-finite loss");
        adam_step(res.model.generative.theta(), g.theta, adam);
        adam_step(res.model.posterior.phi(), g.phi, adam);
        const double w = static_cast<double>(end - begin) / static_cast<double>(N);
        tr.vibo += g.mean.total * w;
        tr.recon += g.mean.recon * w;
        tr.kl_ability += g.mean.kl_ability * w;
        tr.kl_item += g.mean.kl_item * w;
      } catch (const NumericalError& e) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                                std::to_string(batch + 1) + ": " + e.what(),
                            epoch + 1, batch + 1);
      }
    }
    tr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    res.trace.push_back(tr);
  }
  res.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

nlohmann::json training_report(const FitResult& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& t : r.trace)
    epochs.push_back({{"epoch", t.epoch},
                      {"vibo", t.vibo},
                      {"recon", t.recon},
                      {"kl_ability", t.kl_ability},
                      {"kl_item", t.kl_item},
                      {"seconds", t.seconds}});
  return {{"config", r.config.to_json()},
          {"spec", r.model.generative.spec().to_json()},
          {"epochs", epochs},
          {"wall_clock_sec", r.wall_clock_seconds}};
}

}  // namespace vibo
