#pragma once

// Finite-difference gradient verification shared by the unit tests and the
// acceptance gate. A check builds the loss graph from scratch on every
// forward evaluation so that stateful pieces (dropout masks, batchnorm
// statistics) are reproduced identically; randomness must be derived from
// a seed captured inside the builder.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "npnorm/autodiff.hpp"
#include "npnorm/tensor.hpp"

namespace npnorm::testing {

// Builds a scalar loss node from leaf nodes created for `inputs` (in
// order) on the given tape.
using LossBuilder =
    std::function<ad::Node*(ad::Tape&, const std::vector<ad::Node*>&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t entries = 0;
};

inline double symmetric_rel_err(double a, double b) {
  const double diff = std::abs(a - b);
  const double scale = std::abs(a) + std::abs(b);
  // Both tiny: treat as matching absolutely.
  if (scale < 1e-6) return diff;
  return diff / scale;
}

// Compares reverse-mode gradients against central differences for every
// entry of every input (or a stride-sampled subset when max_entries_per_input
// is set). Returns the worst symmetric relative error.
inline GradCheckReport check_gradients(const LossBuilder& build,
                                       std::vector<Tensor> inputs,
                                       double h = 1e-5,
                                       std::size_t max_entries_per_input = 0) {
  auto eval = [&](const std::vector<Tensor>& vals) {
    ad::Tape t;
    std::vector<ad::Node*> leaves;
    leaves.reserve(vals.size());
    for (const auto& v : vals) leaves.push_back(t.param(v));
    return build(t, leaves)->value[0];
  };

  ad::Tape t;
  std::vector<ad::Node*> leaves;
  for (const auto& v : inputs) leaves.push_back(t.param(v));
  ad::Node* loss = build(t, leaves);
  t.backward(loss);

  GradCheckReport rep;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].numel();
    std::size_t stride = 1;
    if (max_entries_per_input > 0 && n > max_entries_per_input)
      stride = (n + max_entries_per_input - 1) / max_entries_per_input;
    for (std::size_t j = 0; j < n; j += stride) {
      const double orig = inputs[i][j];
      inputs[i][j] = orig + h;
      const double lp = eval(inputs);
      inputs[i][j] = orig - h;
      const double lm = eval(inputs);
      inputs[i][j] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = leaves[i]->has_grad() ? leaves[i]->grad[j] : 0.0;
      rep.max_rel_err = std::max(rep.max_rel_err, symmetric_rel_err(an, fd));
      ++rep.entries;
    }
  }
  return rep;
}

}  // namespace npnorm::testing
