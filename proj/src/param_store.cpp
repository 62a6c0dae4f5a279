#include "vibo/param_store.hpp"

namespace vibo {

void ParamStore::add(const std::string& name, Matrix value) {
  if (entries_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
  if (!value.allFinite()) throw NumericalError("parameter '" + name + "' initialized non-finite");
  Entry e;
  e.first_moment = Matrix::Zero(value.rows(), value.cols());
  e.second_moment = Matrix::Zero(value.rows(), value.cols());
  e.value = std::move(value);
  entries_.emplace(name, std::move(e));
  order_.push_back(name);
}

bool ParamStore::contains(const std::string& name) const { return entries_.count(name) != 0; }

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

ParamStore::Entry& ParamStore::mutable_entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

const Matrix& ParamStore::value(const std::string& name) const { return entry(name).value; }

Matrix& ParamStore::mutable_value(const std::string& name) { return mutable_entry(name).value; }

Index ParamStore::parameter_count() const {
  Index n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json values = nlohmann::json::array();
  for (Index i = 0; i < m.size(); ++i) values.push_back(m.data()[i]);
  return {{"shape", {m.rows(), m.cols()}}, {"values", std::move(values)}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto& shape = j.at("shape");
  if (!shape.is_array() || shape.size() != 2) throw ConfigError("tensor shape must have two entries");
  const Index rows = shape[0].get<Index>();
  const Index cols = shape[1].get<Index>();
  const auto& values = j.at("values");
  if (static_cast<Index>(values.size()) != rows * cols)
    throw DimensionError("tensor value count does not match its shape");
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = values[static_cast<std::size_t>(i)].get<double>();
  return m;
}

nlohmann::json ParamStore::to_json() const {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& name : order_) {
    const Entry& e = entries_.at(name);
    params.push_back({{"name", name},
                      {"value", matrix_to_json(e.value)},
                      {"first_moment", matrix_to_json(e.first_moment)},
                      {"second_moment", matrix_to_json(e.second_moment)}});
  }
  return {{"iteration", iteration_}, {"parameters", std::move(params)}};
}

ParamStore ParamStore::from_json(const nlohmann::json& j) {
  ParamStore store;
  for (const auto& p : j.at("parameters")) {
    const auto name = p.at("name").get<std::string>();
    store.add(name, matrix_from_json(p.at("value")));
    Entry& e = store.mutable_entry(name);
    e.first_moment = matrix_from_json(p.at("first_moment"));
    e.second_moment = matrix_from_json(p.at("second_moment"));
    if (e.first_moment.rows() != e.value.rows() || e.first_moment.cols() != e.value.cols() ||
        e.second_moment.rows() != e.value.rows() || e.second_moment.cols() != e.value.cols())
      throw DimensionError("moment shape mismatch for parameter '" + name + "'");
  }
  store.iteration_ = j.at("iteration").get<std::int64_t>();
  return store;
}

void check_finite(const Gradient& grad) {
  for (const auto& [name, g] : grad)
    if (!g.allFinite()) throw NumericalError("non-finite gradient for tensor '" + name + "'");
}

}  // namespace vibo
