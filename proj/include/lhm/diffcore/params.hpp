#pragma once

#include "lhm/diffcore/plain.hpp"

#include <json.hpp>

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

namespace lhm::ad {

using Shape = std::vector<std::size_t>;

// Named parameter arrays in insertion order. Values are stored as Eigen
// matrices; vectors are n x 1 and scalars 1 x 1, with the declared shape kept
// alongside for serialization.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    Mat value;
  };

  void add(const std::string& name, Mat value, Shape shape) {
    if (index_.contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    if (n != static_cast<std::size_t>(value.size())) throw ContractError("parameter '" + name + "' shape/size mismatch");
    index_.emplace(name, entries_.size());
    entries_.push_back({name, std::move(shape), std::move(value)});
  }
  void add_scalar(const std::string& name, double v) { add(name, Mat::Constant(1, 1, v), {}); }
  void add_vector(const std::string& name, const Vec& v) {
    add(name, Mat(v), {static_cast<std::size_t>(v.size())});
  }
  void add_matrix(const std::string& name, const Mat& m) {
    add(name, m, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  }

  [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }
  [[nodiscard]] std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  [[nodiscard]] const Mat& get(const std::string& name) const { return entries_[index(name)].value; }
  Mat& get(const std::string& name) { return entries_[index(name)].value; }

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  [[nodiscard]] std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  // Merges another set under a name prefix ("prefix.name").
  void absorb(const std::string& prefix, const ParamSet& other) {
    for (const auto& e : other.entries_) add(prefix + "." + e.name, e.value, e.shape);
  }

  [[nodiscard]] nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& e : entries_) {
      std::vector<double> vals;
      vals.reserve(static_cast<std::size_t>(e.value.size()));
      // row-major flattening
      for (Eigen::Index r = 0; r < e.value.rows(); ++r)
        for (Eigen::Index c = 0; c < e.value.cols(); ++c) vals.push_back(e.value(r, c));
      j[e.name] = {{"shape", e.shape}, {"values", vals}};
    }
    return j;
  }

  static ParamSet from_json(const nlohmann::ordered_json& j) {
    ParamSet p;
    for (const auto& [name, item] : j.items()) {
      const Shape shape = item.at("shape").get<Shape>();
      const auto vals = item.at("values").get<std::vector<double>>();
      Eigen::Index rows = 1, cols = 1;
      if (shape.size() == 1) {
        rows = static_cast<Eigen::Index>(shape[0]);
      } else if (shape.size() == 2) {
        rows = static_cast<Eigen::Index>(shape[0]);
        cols = static_cast<Eigen::Index>(shape[1]);
      } else if (!shape.empty()) {
        throw ContractError("parameter '" + name + "': only rank <= 2 supported");
      }
      if (static_cast<std::size_t>(rows * cols) != vals.size())
        throw ContractError("parameter '" + name + "': value count does not match shape");
      Mat m(rows, cols);
      std::size_t k = 0;
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = vals[k++];
      p.add(name, std::move(m), shape);
    }
    return p;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.shape != y.shape || x.value.rows() != y.value.rows() ||
          x.value.cols() != y.value.cols() || x.value != y.value)
        return false;
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// name -> gradient array, aligned with the ParamSet it was computed for.
class GradMap {
 public:
  GradMap() = default;
  explicit GradMap(const ParamSet& p) {
    names_.reserve(p.size());
    grads_.reserve(p.size());
    for (const auto& e : p.entries()) {
      names_.push_back(e.name);
      grads_.push_back(Mat::Zero(e.value.rows(), e.value.cols()));
    }
  }

  [[nodiscard]] std::size_t size() const { return grads_.size(); }
  [[nodiscard]] const std::string& name(std::size_t i) const { return names_[i]; }
  [[nodiscard]] const Mat& operator[](std::size_t i) const { return grads_[i]; }
  Mat& operator[](std::size_t i) { return grads_[i]; }
  [[nodiscard]] const Mat& at(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return grads_[i];
    throw ContractError("no gradient for '" + name + "'");
  }

  GradMap& operator+=(const GradMap& o) {
    if (o.size() != size()) throw ContractError("GradMap: size mismatch");
    for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += o.grads_[i];
    return *this;
  }
  GradMap& operator*=(double s) {
    for (auto& g : grads_) g *= s;
    return *this;
  }

  [[nodiscard]] bool all_finite() const {
    for (const auto& g : grads_)
      if (!g.allFinite()) return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Mat> grads_;
};

// Parameters materialized on a backend: tape leaves or plain copies.
template <class T>
struct Bound {
  std::vector<T> values;
  const ParamSet* source = nullptr;
  [[nodiscard]] const T& operator[](std::size_t i) const { return values[i]; }
  [[nodiscard]] const T& operator()(const std::string& name) const { return values[source->index(name)]; }
};

inline Bound<Var> bind(const ParamSet& p, Tape& tape) {
  Bound<Var> b;
  b.source = &p;
  b.values.reserve(p.size());
  for (const auto& e : p.entries()) b.values.push_back(tape.leaf(e.value));
  return b;
}

inline Bound<Mat> bind(const ParamSet& p) {
  Bound<Mat> b;
  b.source = &p;
  b.values.reserve(p.size());
  for (const auto& e : p.entries()) b.values.push_back(e.value);
  return b;
}

// Runs the reverse sweep from a scalar loss and collects leaf adjoints.
inline GradMap grad(const Var& loss, const Bound<Var>& params) {
  loss.tape()->backward(loss);
  GradMap g(*params.source);
  for (std::size_t i = 0; i < params.values.size(); ++i) g[i] = loss.tape()->adjoint(params.values[i]);
  return g;
}

}  // namespace lhm::ad
