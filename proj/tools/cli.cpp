#include "cli.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>

namespace vibo::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::Vibo: return "vibo";
    case Algorithm::Jmle: return "jmle";
    case Algorithm::Em: return "em";
  }
  return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "vibo") return Algorithm::Vibo;
  if (s == "jmle") return Algorithm::Jmle;
  if (s == "em") return Algorithm::Em;
  throw ConfigError("unknown algorithm '" + s + "' (expected vibo, jmle or em)");
}

namespace {

void expect_keys(const json& j, const std::string& section, const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key))
      throw ConfigError("unknown key '" + key + "' in config" + (section.empty() ? "" : " section '" + section + "'"));
}

template <class T>
void take(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

JmleConfig jmle_from_json(const json& j) {
  expect_keys(j, "jmle", {"epochs", "learning_rate", "batch_size", "init_scale"});
  JmleConfig c;
  take(j, "epochs", c.epochs);
  take(j, "learning_rate", c.learning_rate);
  take(j, "batch_size", c.batch_size);
  take(j, "init_scale", c.init_scale);
  return c;
}

json jmle_to_json(const JmleConfig& c) {
  return {{"epochs", c.epochs}, {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"init_scale", c.init_scale}};
}

EmConfig em_from_json(const json& j) {
  expect_keys(j, "em", {"max_iters", "tol", "nodes", "bound", "newton_tol", "newton_cap"});
  EmConfig c;
  take(j, "max_iters", c.max_iters);
  take(j, "tol", c.tol);
  take(j, "nodes", c.nodes);
  take(j, "bound", c.bound);
  take(j, "newton_tol", c.newton_tol);
  take(j, "newton_cap", c.newton_cap);
  return c;
}

json em_to_json(const EmConfig& c) {
  return {{"max_iters", c.max_iters}, {"tol", c.tol},           {"nodes", c.nodes},
          {"bound", c.bound},         {"newton_tol", c.newton_tol}, {"newton_cap", c.newton_cap}};
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  try {
    expect_keys(j, "", {"seed", "out_dir", "threads", "data", "checkpoint", "algorithm", "model", "vibo", "jmle", "em",
                        "simulate", "holdout", "eval", "icc"});
    RunConfig c;
    take(j, "seed", c.seed);
    take(j, "out_dir", c.out_dir);
    take(j, "threads", c.threads);
    take(j, "data", c.data);
    take(j, "checkpoint", c.checkpoint);
    if (j.contains("algorithm")) c.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
    if (j.contains("model")) {
      const json& m = j.at("model");
      expect_keys(m, "model", {"family", "K", "mode", "hidden_width", "hidden_layers"});
      if (m.contains("family")) c.model.family = family_from_string(m.at("family").get<std::string>());
      take(m, "K", c.model.K);
      if (m.contains("mode")) c.model.mode = response_mode_from_string(m.at("mode").get<std::string>());
      take(m, "hidden_width", c.model.hidden_width);
      take(m, "hidden_layers", c.model.hidden_layers);
    }
    if (j.contains("vibo")) {
      if (j.at("vibo").contains("seed")) throw ConfigError("vibo.seed is not configurable; use the top-level seed");
      c.vibo = ViboConfig::from_json(j.at("vibo"));
    }
    if (j.contains("jmle")) c.jmle = jmle_from_json(j.at("jmle"));
    if (j.contains("em")) c.em = em_from_json(j.at("em"));
    if (j.contains("simulate")) {
      const json& s = j.at("simulate");
      expect_keys(s, "simulate", {"family", "N", "M", "K", "missing_frac", "mode", "out"});
      if (s.contains("family")) c.simulate.family = family_from_string(s.at("family").get<std::string>());
      take(s, "N", c.simulate.N);
      take(s, "M", c.simulate.M);
      take(s, "K", c.simulate.K);
      take(s, "missing_frac", c.simulate.missing_frac);
      if (s.contains("mode")) c.simulate.mode = response_mode_from_string(s.at("mode").get<std::string>());
      take(s, "out", c.simulate.out);
    }
    if (j.contains("holdout") && !j.at("holdout").is_null()) {
      const json& h = j.at("holdout");
      expect_keys(h, "holdout", {"fraction", "seed"});
      HoldoutSection hs;
      take(h, "fraction", hs.fraction);
      if (h.contains("seed")) hs.seed = h.at("seed").get<std::uint64_t>();
      c.holdout = hs;
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      expect_keys(e, "eval", {"metrics", "log_marginal_samples", "ppc_samples", "mean_samples"});
      take(e, "metrics", c.eval.metrics);
      take(e, "log_marginal_samples", c.eval.log_marginal_samples);
      take(e, "ppc_samples", c.eval.ppc_samples);
      take(e, "mean_samples", c.eval.mean_samples);
      for (const auto& m : c.eval.metrics)
        if (m != "log_marginal" && m != "ppc" && m != "correlation") throw ConfigError("unknown metric '" + m + "'");
    }
    if (j.contains("icc")) {
      const json& i = j.at("icc");
      expect_keys(i, "icc", {"items", "params", "min", "max", "points", "out"});
      take(i, "items", c.icc.items);
      if (i.contains("params") && !i.at("params").is_null()) c.icc.params = i.at("params").get<std::vector<double>>();
      take(i, "min", c.icc.min);
      take(i, "max", c.icc.max);
      take(i, "points", c.icc.points);
      take(i, "out", c.icc.out);
    }
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
}

json RunConfig::to_json() const {
  json model{{"family", vibo::to_string(this->model.family)},
             {"K", this->model.K},
             {"hidden_width", this->model.hidden_width},
             {"hidden_layers", this->model.hidden_layers}};
  if (this->model.mode) model["mode"] = vibo::to_string(*this->model.mode);
  json v = vibo.to_json();
  v.erase("seed");
  json j{{"seed", seed},
         {"out_dir", out_dir},
         {"threads", threads},
         {"data", data},
         {"checkpoint", checkpoint},
         {"algorithm", cli::to_string(algorithm)},
         {"model", model},
         {"vibo", v},
         {"jmle", jmle_to_json(jmle)},
         {"em", em_to_json(em)},
         {"simulate",
          {{"family", vibo::to_string(simulate.family)},
           {"N", simulate.N},
           {"M", simulate.M},
           {"K", simulate.K},
           {"missing_frac", simulate.missing_frac},
           {"mode", vibo::to_string(simulate.mode)},
           {"out", simulate.out}}},
         {"eval",
          {{"metrics", eval.metrics},
           {"log_marginal_samples", eval.log_marginal_samples},
           {"ppc_samples", eval.ppc_samples},
           {"mean_samples", eval.mean_samples}}},
         {"icc",
          {{"items", icc.items}, {"min", icc.min}, {"max", icc.max}, {"points", icc.points}, {"out", icc.out}}}};
  if (icc.params) j["icc"]["params"] = *icc.params;
  if (holdout) {
    j["holdout"] = {{"fraction", holdout->fraction}};
    if (holdout->seed) j["holdout"]["seed"] = *holdout->seed;
  }
  return j;
}

std::string RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? (fs::path(out_dir) / "checkpoint.json").string() : checkpoint;
}

json error_json(const std::exception& e) {
  json err{{"message", e.what()}};
  if (const auto* pe = dynamic_cast<const ParseError*>(&e)) {
    err["kind"] = pe->kind();
    err["line"] = pe->line();
    err["row"] = pe->row();
  } else if (const auto* te = dynamic_cast<const TrainingError*>(&e)) {
    err["kind"] = te->kind();
    err["epoch"] = te->epoch();
    err["batch"] = te->batch();
  } else if (const auto* ve = dynamic_cast<const Error*>(&e)) {
    err["kind"] = ve->kind();
  } else if (dynamic_cast<const CLI::Error*>(&e)) {
    err["kind"] = "usage_error";
  } else if (dynamic_cast<const json::exception*>(&e)) {
    err["kind"] = "config_error";
  } else {
    err["kind"] = "internal_error";
  }
  return {{"error", err}};
}

namespace {

struct Checkpoint {
  Algorithm algorithm = Algorithm::Vibo;
  ModelSpec spec;
  std::vector<std::string> person_ids, item_ids;
  std::optional<std::pair<double, std::uint64_t>> holdout;
  std::optional<ViboModel> vibo;
  GenerativeModel generative;
  std::optional<PointEstimates> estimates;
};

json checkpoint_json(const Checkpoint& c) {
  json j{{"format", "vibo-checkpoint"},
         {"version", 1},
         {"algorithm", to_string(c.algorithm)},
         {"spec", c.spec.to_json()},
         {"person_ids", c.person_ids},
         {"item_ids", c.item_ids},
         {"holdout", nullptr}};
  if (c.holdout) j["holdout"] = {{"fraction", c.holdout->first}, {"seed", c.holdout->second}};
  if (c.vibo) {
    j["model"] = c.vibo->to_json();
  } else {
    j["generative"] = c.generative.to_json();
    j["estimates"] = {{"abilities", matrix_to_json(c.estimates->abilities)},
                      {"items", matrix_to_json(c.estimates->items)}};
  }
  return j;
}

Checkpoint load_checkpoint(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  if (j.value("format", std::string()) != "vibo-checkpoint") throw ConfigError("'" + path + "' is not a checkpoint");
  Checkpoint c;
  c.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
  c.spec = ModelSpec::from_json(j.at("spec"));
  c.person_ids = j.at("person_ids").get<std::vector<std::string>>();
  c.item_ids = j.at("item_ids").get<std::vector<std::string>>();
  if (!j.at("holdout").is_null())
    c.holdout = std::make_pair(j["holdout"].at("fraction").get<double>(), j["holdout"].at("seed").get<std::uint64_t>());
  if (c.algorithm == Algorithm::Vibo) {
    c.vibo = ViboModel::from_json(j.at("model"));
    c.generative = c.vibo->generative;
  } else {
    c.generative = GenerativeModel::from_json(j.at("generative"));
    c.estimates = PointEstimates{matrix_from_json(j.at("estimates").at("abilities")),
                                 matrix_from_json(j.at("estimates").at("items"))};
  }
  return c;
}

ResponseDataset load_data(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("no response data given (--data or config 'data')");
  if (!fs::exists(cfg.data)) throw ConfigError("data file '" + cfg.data + "' does not exist");
  ResponseDataset data = read_csv(cfg.data);
  data.truth = read_ground_truth(cfg.data);
  return data;
}

void check_matches(const Checkpoint& ck, const ResponseDataset& data) {
  if (data.items() != static_cast<Index>(ck.item_ids.size()))
    throw DimensionError("data has " + std::to_string(data.items()) + " items, checkpoint has " +
                         std::to_string(ck.item_ids.size()));
  if (data.mode() != ck.spec.mode)
    throw ConfigError("mode mismatch: data is " + to_string(data.mode()) + ", model is " + to_string(ck.spec.mode));
  const bool per_person = ck.estimates || (ck.vibo && ck.vibo->posterior.mode() == PosteriorMode::Unamortized);
  if (per_person && data.persons() != static_cast<Index>(ck.person_ids.size()))
    throw DimensionError("data has " + std::to_string(data.persons()) + " persons, checkpoint has " +
                         std::to_string(ck.person_ids.size()));
}

// Item means, with flows a Monte Carlo average of pushed samples.
Matrix item_means(const ViboModel& model, int samples, std::uint64_t seed) {
  const auto& post = model.posterior;
  const Matrix mu = post.phi().value(post.item_table().mu_name());
  if (post.flow_count() == 0) return mu;
  const Matrix sd = (0.5 * post.phi().value(post.item_table().log_var_name()).array()).exp();
  Rng rng(seed);
  PlainContext ctx;
  Matrix acc = Matrix::Zero(mu.rows(), mu.cols());
  for (int s = 0; s < samples; ++s) {
    const Matrix z0 = mu.array() + sd.array() * standard_normal(rng, mu.rows(), mu.cols()).array();
    acc += post.item_flows().push(ctx, post.phi(), z0).first;
  }
  return acc / samples;
}

json cmd_simulate(const RunConfig& cfg) {
  SimulateOptions opt;
  opt.family = cfg.simulate.family;
  opt.N = cfg.simulate.N;
  opt.M = cfg.simulate.M;
  opt.K = cfg.simulate.K;
  opt.missing_frac = cfg.simulate.missing_frac;
  opt.mode = cfg.simulate.mode;
  opt.seed = cfg.seed;
  const auto t0 = std::chrono::steady_clock::now();
  const ResponseDataset data = simulate(opt);
  const fs::path path = cfg.simulate.out.empty() ? fs::path(cfg.out_dir) / "data.csv" : fs::path(cfg.simulate.out);
  write_csv(data, path);
  write_ground_truth(data, path);
  const fs::path stem = path.parent_path() / path.stem();
  return {{"command", "simulate"},
          {"data", path.string()},
          {"abilities", stem.string() + ".abilities.csv"},
          {"items", stem.string() + ".items.csv"},
          {"family", to_string(opt.family)},
          {"mode", to_string(opt.mode)},
          {"persons", data.persons()},
          {"item_count", data.items()},
          {"K", opt.K},
          {"observed_cells", data.observed_count()},
          {"seed", cfg.seed},
          {"wall_clock_sec", seconds_since(t0)}};
}

json cmd_fit(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const ResponseDataset full = load_data(cfg);
  ModelSpec spec;
  spec.family = cfg.model.family;
  spec.K = cfg.model.K;
  spec.mode = cfg.model.mode.value_or(full.mode());
  spec.hidden_width = cfg.model.hidden_width;
  spec.hidden_layers = cfg.model.hidden_layers;
  spec.validate();
  if (spec.mode != full.mode())
    throw ConfigError("mode mismatch: data is " + to_string(full.mode()) + ", model is " + to_string(spec.mode));

  Checkpoint ck;
  ck.algorithm = cfg.algorithm;
  ck.spec = spec;
  ck.person_ids = full.person_ids;
  ck.item_ids = full.item_ids;
  ResponseDataset train = full;
  if (cfg.holdout) {
    const HoldoutSplit split = make_holdout(full, cfg.holdout->fraction, cfg.holdout_seed());
    train = split.training_view(full);
    ck.holdout = std::make_pair(cfg.holdout->fraction, cfg.holdout_seed());
  }

  const fs::path dir(cfg.out_dir);
  json report;
  switch (cfg.algorithm) {
    case Algorithm::Vibo: {
      ViboConfig vc = cfg.vibo;
      vc.seed = cfg.seed;
      FitResult res = fit(train, spec, vc);
      report = training_report(res);
      const PosteriorSummary s = posterior_summary(res.model, train, cfg.eval.mean_samples, cfg.seed);
      write_text(dir / "abilities.csv", gaussian_table_csv("person_id", train.person_ids, s.ability_mu, s.ability_var));
      write_text(dir / "items.csv", gaussian_table_csv("item_id", train.item_ids, s.item_mu, s.item_var));
      write_text(dir / "item_params.csv", item_params_csv(spec, s.item_mu, train.item_ids));
      ck.generative = res.model.generative;
      ck.vibo = std::move(res.model);
      break;
    }
    case Algorithm::Jmle: {
      JmleConfig jc = cfg.jmle;
      jc.seed = cfg.seed;
      JmleResult res = fit_jmle(train, spec, jc);
      json epochs = json::array();
      for (std::size_t e = 0; e < res.trace.size(); ++e) epochs.push_back({{"epoch", e + 1}, {"loglik", res.trace[e]}});
      report = {{"config", jmle_to_json(jc)},
                {"spec", spec.to_json()},
                {"epochs", epochs},
                {"wall_clock_sec", res.wall_clock_seconds}};
      ck.estimates = std::move(res.estimates);
      break;
    }
    case Algorithm::Em: {
      EmResult res = em_fit(train, spec, cfg.em);
      json iters = json::array();
      for (std::size_t t = 0; t < res.trace.size(); ++t)
        iters.push_back({{"iteration", t + 1}, {"marginal_loglik", res.trace[t]}});
      json flagged = json::array();
      for (std::size_t j = 0; j < res.flagged.size(); ++j)
        if (res.flagged[j]) flagged.push_back(train.item_ids[j]);
      report = {{"config", em_to_json(cfg.em)},
                {"spec", spec.to_json()},
                {"iterations", iters},
                {"converged", res.converged},
                {"flagged_items", flagged},
                {"wall_clock_sec", res.wall_clock_seconds}};
      ck.estimates = std::move(res.estimates);
      break;
    }
  }
  if (ck.estimates) {
    Rng rng(cfg.seed);
    ck.generative = GenerativeModel(spec, rng);
    write_text(dir / "abilities.csv",
               gaussian_table_csv("person_id", train.person_ids, ck.estimates->abilities, std::nullopt));
    write_text(dir / "items.csv", gaussian_table_csv("item_id", train.item_ids, ck.estimates->items, std::nullopt));
    write_text(dir / "item_params.csv", item_params_csv(spec, ck.estimates->items, train.item_ids));
  }
  const std::string ck_path = cfg.checkpoint_path();
  write_text(ck_path, checkpoint_json(ck).dump());
  report["command"] = "fit";
  report["algorithm"] = to_string(cfg.algorithm);
  report["checkpoint"] = ck_path;
  report["seed"] = cfg.seed;
  report["holdout"] = ck.holdout ? json{{"fraction", ck.holdout->first}, {"seed", ck.holdout->second}} : json(nullptr);
  report["total_wall_clock_sec"] = seconds_since(t0);
  write_text(dir / "report.json", report.dump(2));
  return report;
}

json cmd_impute(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint ck = load_checkpoint(cfg.checkpoint_path());
  const ResponseDataset data = load_data(cfg);
  check_matches(ck, data);
  double fraction = 0.1;
  std::uint64_t seed = cfg.seed;
  if (cfg.holdout) {
    fraction = cfg.holdout->fraction;
    seed = cfg.holdout_seed();
  } else if (ck.holdout) {
    fraction = ck.holdout->first;
    seed = ck.holdout->second;
  }
  const bool trained_without = ck.holdout && ck.holdout->first == fraction && ck.holdout->second == seed;
  const HoldoutSplit split = make_holdout(data, fraction, seed);
  Metrics m;
  m.accuracy = ck.vibo ? impute_accuracy(*ck.vibo, data, split, cfg.eval.mean_samples, cfg.seed)
                       : impute_accuracy(ck.generative, *ck.estimates, data, split);
  m.wall_clock_sec = seconds_since(t0);
  json j = metrics_json(m);
  j["command"] = "impute";
  j["holdout_cells"] = split.cells.size();
  j["holdout_fraction"] = fraction;
  j["holdout_seed"] = seed;
  j["trained_without_holdout"] = trained_without;
  write_text(fs::path(cfg.out_dir) / "impute.json", j.dump(2));
  return j;
}

json cmd_eval(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint ck = load_checkpoint(cfg.checkpoint_path());
  const ResponseDataset full = load_data(cfg);
  check_matches(ck, full);
  ResponseDataset data = full;
  if (ck.holdout) data = make_holdout(full, ck.holdout->first, ck.holdout->second).training_view(full);
  const std::set<std::string> want(cfg.eval.metrics.begin(), cfg.eval.metrics.end());

  Metrics m;
  json extra{{"command", "eval"}, {"algorithm", to_string(ck.algorithm)},
             {"evaluated_on", ck.holdout ? "training_view" : "all_observed"}};
  if (want.count("log_marginal")) {
    if (ck.vibo) {
      m.log_marginal = log_marginal(*ck.vibo, data, cfg.eval.log_marginal_samples, cfg.seed).total;
      extra["log_marginal_samples"] = cfg.eval.log_marginal_samples;
    } else if (ck.algorithm == Algorithm::Em) {
      const auto rule = quadrature_rule(ck.spec.K, cfg.em.nodes);
      m.log_marginal = em_estep(ck.generative, ck.estimates->items, rule, data).marginal_loglik;
      extra["log_marginal_method"] = "quadrature";
    }
  }
  if (want.count("ppc") && ck.vibo) {
    m.predictive = posterior_predictive_stats(*ck.vibo, data, cfg.eval.ppc_samples, cfg.seed);
    Vector row(data.persons()), col(data.items());
    Vector row_n = Vector::Zero(data.persons()), col_n = Vector::Zero(data.items());
    row.setZero();
    col.setZero();
    for (Index i = 0; i < data.persons(); ++i)
      for (Index j = 0; j < data.items(); ++j)
        if (data.observed(i, j)) {
          row(i) += data.value(i, j);
          col(j) += data.value(i, j);
          row_n(i) += 1;
          col_n(j) += 1;
        }
    row = (row_n.array() > 0).select(row.array() / row_n.array(), 0.0);
    col = (col_n.array() > 0).select(col.array() / col_n.array(), 0.0);
    extra["observed_person_means"] = to_vec(row);
    extra["observed_item_means"] = to_vec(col);
  }
  if (want.count("correlation") && full.truth) {
    const Matrix abilities =
        ck.vibo ? posterior_means(*ck.vibo, data, cfg.eval.mean_samples, cfg.seed).abilities : ck.estimates->abilities;
    const Vector rho = correlation_per_dim(abilities, full.truth->abilities);
    m.correlation_per_dim = rho;
    extra["aligned_correlation"] = rho.cwiseAbs().mean();
  }
  m.wall_clock_sec = seconds_since(t0);
  json j = metrics_json(m);
  j.update(extra);
  write_text(fs::path(cfg.out_dir) / "eval.json", j.dump(2));
  return j;
}

json cmd_icc(const RunConfig& cfg) {
  const Checkpoint ck = load_checkpoint(cfg.checkpoint_path());
  const ModelSpec& spec = ck.spec;
  const Index K = spec.K, P = spec.item_dim();
  if (cfg.icc.points < 2) throw ConfigError("icc needs at least two grid points");
  if (!(cfg.icc.max > cfg.icc.min)) throw ConfigError("icc grid maximum must exceed its minimum");

  std::vector<std::string> ids;
  std::vector<Vector> rows;
  if (cfg.icc.params) {
    if (static_cast<Index>(cfg.icc.params->size()) != P)
      throw DimensionError("icc params need " + std::to_string(P) + " values for " + to_string(spec.family));
    ids.push_back("params");
    rows.push_back(Eigen::Map<const Vector>(cfg.icc.params->data(), P));
  } else {
    const Matrix items = ck.vibo ? item_means(*ck.vibo, cfg.eval.mean_samples, cfg.seed) : ck.estimates->items;
    const std::vector<std::string> wanted = cfg.icc.items.empty() ? ck.item_ids : cfg.icc.items;
    for (const auto& id : wanted) {
      const auto it = std::find(ck.item_ids.begin(), ck.item_ids.end(), id);
      if (it == ck.item_ids.end()) throw ConfigError("unknown item id '" + id + "'");
      ids.push_back(id);
      rows.push_back(items.row(it - ck.item_ids.begin()).transpose());
    }
  }

  const Index G = cfg.icc.points;
  Vector grid(G);
  for (Index g = 0; g < G; ++g)
    grid(g) = cfg.icc.min + (cfg.icc.max - cfg.icc.min) * static_cast<double>(g) / static_cast<double>(G - 1);
  // K = 1: a curve. K >= 2: a grid over the first two dimensions, the rest at 0.
  const Index cells = K == 1 ? G : G * G;
  Matrix abilities = Matrix::Zero(cells, K);
  for (Index c = 0; c < cells; ++c) {
    abilities(c, 0) = grid(K == 1 ? c : c / G);
    if (K >= 2) abilities(c, 1) = grid(c % G);
  }

  std::ostringstream csv;
  csv << "item_id,a_1" << (K >= 2 ? ",a_2" : "") << ",p\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Matrix item_rows = rows[r].transpose().replicate(cells, 1);
    const Matrix p = ck.generative.prob(abilities, item_rows);
    for (Index c = 0; c < cells; ++c) {
      csv << ids[r] << ',' << format_double(abilities(c, 0));
      if (K >= 2) csv << ',' << format_double(abilities(c, 1));
      csv << ',' << format_double(p(c, 0)) << '\n';
    }
  }
  const fs::path path = cfg.icc.out.empty() ? fs::path(cfg.out_dir) / "icc.csv" : fs::path(cfg.icc.out);
  write_text(path, csv.str());
  return {{"command", "icc"},
          {"csv", path.string()},
          {"items", ids},
          {"rows", static_cast<Index>(rows.size()) * cells},
          {"grid_points", G},
          {"min", cfg.icc.min},
          {"max", cfg.icc.max}};
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Amortized variational inference for item response models"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  app.add_option("--config", config_path, "Run configuration JSON")->envname("VIBO_CONFIG");
  app.add_option("--seed", seed, "Seed for all randomness")->envname("VIBO_SEED");
  app.add_option("--out-dir", out_dir, "Output directory")->envname("VIBO_OUT_DIR");
  app.add_option("--threads", threads, "Worker threads")->envname("VIBO_THREADS")->check(CLI::PositiveNumber);

  std::optional<std::string> family, mode, out_path, data, algorithm, posterior, checkpoint, items_csv, params_csv;
  std::optional<Index> n, m, k, points, batch;
  std::optional<double> missing, beta, lr, holdout, lo, hi;
  std::optional<std::uint64_t> holdout_seed;
  std::optional<int> epochs, flows, samples, ppc_samples;
  std::optional<std::string> metrics;

  auto* sim = app.add_subcommand("simulate", "Simulate a synthetic response matrix");
  sim->add_option("--family", family, "2pl, mirt or idl (any analytic family)");
  sim->add_option("--n", n, "Persons");
  sim->add_option("--m", m, "Items");
  sim->add_option("--k", k, "Ability dimensions");
  sim->add_option("--missing", missing, "Fraction of cells masked");
  sim->add_option("--mode", mode, "binary or continuous");
  sim->add_option("--out", out_path, "Response CSV path");

  auto* fitc = app.add_subcommand("fit", "Fit a model with vibo, jmle or em");
  fitc->add_option("--data", data, "Response CSV");
  fitc->add_option("--algorithm", algorithm, "vibo, jmle or em");
  fitc->add_option("--family", family, "Response model family");
  fitc->add_option("--k", k, "Ability dimensions");
  fitc->add_option("--mode", mode, "binary or continuous");
  fitc->add_option("--epochs", epochs, "Training epochs");
  fitc->add_option("--beta", beta, "KL weight");
  fitc->add_option("--lr", lr, "Learning rate");
  fitc->add_option("--batch-size", batch, "Minibatch size");
  fitc->add_option("--posterior", posterior, "product, mean, independent or unamortized");
  fitc->add_option("--flows", flows, "Planar flows per posterior");
  fitc->add_option("--holdout", holdout, "Hold out this fraction of observed cells");
  fitc->add_option("--holdout-seed", holdout_seed, "Seed of the holdout split");
  fitc->add_option("--checkpoint", checkpoint, "Checkpoint output path");

  auto* imp = app.add_subcommand("impute", "Accuracy on held-out responses");
  imp->add_option("--checkpoint", checkpoint, "Checkpoint from fit");
  imp->add_option("--data", data, "Response CSV");
  imp->add_option("--holdout", holdout, "Holdout fraction");
  imp->add_option("--holdout-seed", holdout_seed, "Seed of the holdout split");
  imp->add_option("--samples", samples, "Monte Carlo draws for posterior means under flows");

  auto* ev = app.add_subcommand("eval", "Log marginal, predictive checks and recovery");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint from fit");
  ev->add_option("--data", data, "Response CSV");
  ev->add_option("--samples", samples, "Importance samples for the log marginal");
  ev->add_option("--ppc-samples", ppc_samples, "Posterior predictive simulations");
  ev->add_option("--metrics", metrics, "Comma list of log_marginal, ppc, correlation");

  auto* icc = app.add_subcommand("icc", "Response probability over an ability grid");
  icc->add_option("--checkpoint", checkpoint, "Checkpoint from fit");
  icc->add_option("--items", items_csv, "Comma list of item ids");
  icc->add_option("--params", params_csv, "Comma list of unconstrained item parameters");
  icc->add_option("--min", lo, "Grid minimum");
  icc->add_option("--max", hi, "Grid maximum");
  icc->add_option("--points", points, "Grid points per dimension");
  icc->add_option("--out", out_path, "CSV output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << error_json(e).dump() << '\n';
    return 2;
  }

  try {
    RunConfig cfg;
    if (config_path) cfg = RunConfig::from_json(json::parse(read_text(*config_path)));
    if (seed) cfg.seed = *seed;
    if (out_dir) cfg.out_dir = *out_dir;
    if (threads) cfg.threads = *threads;
    if (data) cfg.data = *data;
    if (checkpoint) cfg.checkpoint = *checkpoint;
    if (holdout) {
      if (!cfg.holdout) cfg.holdout = HoldoutSection{};
      cfg.holdout->fraction = *holdout;
    }
    if (holdout_seed) {
      if (!cfg.holdout) cfg.holdout = HoldoutSection{};
      cfg.holdout->seed = *holdout_seed;
    }
    Eigen::setNbThreads(cfg.threads);

    json result;
    if (*sim) {
      if (family) cfg.simulate.family = family_from_string(*family);
      if (n) cfg.simulate.N = *n;
      if (m) cfg.simulate.M = *m;
      if (k) cfg.simulate.K = *k;
      if (missing) cfg.simulate.missing_frac = *missing;
      if (mode) cfg.simulate.mode = response_mode_from_string(*mode);
      if (out_path) cfg.simulate.out = *out_path;
      result = cmd_simulate(cfg);
    } else if (*fitc) {
      if (algorithm) cfg.algorithm = algorithm_from_string(*algorithm);
      if (family) cfg.model.family = family_from_string(*family);
      if (k) cfg.model.K = *k;
      if (mode) cfg.model.mode = response_mode_from_string(*mode);
      if (epochs) cfg.vibo.epochs = cfg.jmle.epochs = *epochs;
      if (beta) cfg.vibo.beta = *beta;
      if (lr) cfg.vibo.learning_rate = cfg.jmle.learning_rate = *lr;
      if (batch) cfg.vibo.batch_size = cfg.jmle.batch_size = *batch;
      if (posterior) cfg.vibo.posterior_mode = posterior_mode_from_string(*posterior);
      if (flows) cfg.vibo.flows = *flows;
      cfg.vibo.validate();
      result = cmd_fit(cfg);
    } else if (*imp) {
      if (samples) cfg.eval.mean_samples = *samples;
      result = cmd_impute(cfg);
    } else if (*ev) {
      if (samples) cfg.eval.log_marginal_samples = *samples;
      if (ppc_samples) cfg.eval.ppc_samples = *ppc_samples;
      if (metrics) {
        cfg.eval.metrics.clear();
        std::stringstream ss(*metrics);
        for (std::string item; std::getline(ss, item, ',');) {
          if (item != "log_marginal" && item != "ppc" && item != "correlation")
            throw ConfigError("unknown metric '" + item + "'");
          cfg.eval.metrics.push_back(item);
        }
      }
      result = cmd_eval(cfg);
    } else if (*icc) {
      if (items_csv) {
        cfg.icc.items.clear();
        std::stringstream ss(*items_csv);
        for (std::string item; std::getline(ss, item, ',');) cfg.icc.items.push_back(item);
      }
      if (params_csv) {
        std::vector<double> values;
        std::stringstream ss(*params_csv);
        for (std::string item; std::getline(ss, item, ',');) {
          try {
            values.push_back(std::stod(item));
          } catch (const std::exception&) {
            throw ConfigError("invalid icc parameter '" + item + "'");
          }
        }
        cfg.icc.params = values;
      }
      if (lo) cfg.icc.min = *lo;
      if (hi) cfg.icc.max = *hi;
      if (points) cfg.icc.points = *points;
      if (out_path) cfg.icc.out = *out_path;
      result = cmd_icc(cfg);
    }
    out << result.dump(2) << '\n';
    return 0;
  } catch (const std::exception& e) {
    err << error_json(e).dump() << '\n';
    return 1;
  }
}

}  // namespace vibo::cli
