#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "pcq/tape.hpp"

namespace pcq {

// Named parameter tensors, ordered by path (e.g. "fusion.w_q").
using ParameterStore = std::map<std::string, Matrix>;

// Tape leaves for a ParameterStore. Names in `trainable` become variables,
// everything else constants.
class Binding {
public:
  Binding(ad::Tape& tape, const ParameterStore& store, const std::set<std::string>& trainable)
      : tape_(&tape) {
    for (const auto& [name, value] : store)
      vars_.emplace(name, trainable.contains(name) ? tape.variable(value) : tape.constant(value));
  }

  ad::Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return vars_.contains(name); }

  // Gradient per parameter; zero-filled for parameters that received none.
  ParameterStore gradients() const {
    ParameterStore out;
    for (const auto& [name, v] : vars_) {
      const Matrix* g = tape_->grad(v);
      out.emplace(name, g && !g->empty() ? *g : Matrix(v.rows(), v.cols()));
    }
    return out;
  }

  ad::Tape& tape() const { return *tape_; }

private:
  ad::Tape* tape_;
  std::map<std::string, ad::Var> vars_;
};

inline std::vector<double> flatten(const ParameterStore& store, const std::set<std::string>& names) {
  std::vector<double> out;
  for (const auto& name : names) {
    const Matrix& m = store.at(name);
    out.insert(out.end(), m.data().begin(), m.data().end());
  }
  return out;
}

inline void unflatten(ParameterStore& store, const std::set<std::string>& names,
                      std::span<const double> flat) {
  std::size_t pos = 0;
  for (const auto& name : names) {
    Matrix& m = store.at(name);
    if (pos + m.size() > flat.size()) throw Error("unflatten: vector too short");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
              flat.begin() + static_cast<std::ptrdiff_t>(pos + m.size()), m.data().begin());
    pos += m.size();
  }
  if (pos != flat.size()) throw Error("unflatten: vector too long");
}

}  // namespace pcq
