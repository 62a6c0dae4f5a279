#pragma once

#include "vibo/common.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace vibo {

// Named tensors mirroring a ParamStore's shapes.
using Gradient = std::map<std::string, Matrix>;

// Named parameter tensors plus the Adam moment accumulators that go with them.
// Insertion order is preserved so serialization and iteration are stable.
class ParamStore {
 public:
  struct Entry {
    Matrix value;
    Matrix first_moment;
    Matrix second_moment;
  };

  void add(const std::string& name, Matrix value);
  bool contains(const std::string& name) const;
  bool empty() const { return order_.empty(); }
  std::size_t size() const { return order_.size(); }

  const Matrix& value(const std::string& name) const;
  Matrix& mutable_value(const std::string& name);
  const Entry& entry(const std::string& name) const;
  Entry& mutable_entry(const std::string& name);

  const std::vector<std::string>& names() const { return order_; }

  std::int64_t iteration() const { return iteration_; }
  void set_iteration(std::int64_t it) { iteration_ = it; }

  Index parameter_count() const;

  nlohmann::json to_json() const;
  static ParamStore from_json(const nlohmann::json& j);

 private:
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
  std::int64_t iteration_ = 0;
};

// Throws NumericalError naming the first tensor holding NaN/Inf.
void check_finite(const Gradient& grad);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

}  // namespace vibo
