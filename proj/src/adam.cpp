#include "npnorm/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace npnorm {

AdamState AdamState::init(const std::vector<const Tensor*>& params, AdamConfig config) {
  AdamState s;
  s.config = config;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

void adam_step(AdamState& state, std::vector<Tensor*> params,
               const std::vector<const Tensor*>& grads, double lr,
               const std::vector<std::string>& names) {
  if (lr <= 0.0) throw std::invalid_argument("adam_step: lr must be positive");
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: parameter count mismatch");

  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));

  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& theta = *params[p];
    const Tensor& g = *grads[p];
    if (!theta.same_shape(g) || !theta.same_shape(state.m[p]))
      throw std::invalid_argument("adam_step: shape mismatch at parameter " +
                                  (p < names.size() ? names[p] : std::to_string(p)));
    if (!g.all_finite())
      throw std::runtime_error("adam_step: non-finite gradient for parameter " +
                               (p < names.size() ? names[p] : std::to_string(p)));
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    for (std::size_t i = 0; i < theta.numel(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      theta[i] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

LrSchedule::LrSchedule(double start, double end, std::size_t n_epochs)
    : lr_start(start), lr_end(end), epochs(n_epochs) {
  if (!(start > 0.0) || !(end > 0.0))
    throw std::invalid_argument("LrSchedule: rates must be positive");
  if (end > start)
    throw std::invalid_argument("LrSchedule: lr_end must not exceed lr_start");
  if (n_epochs == 0) throw std::invalid_argument("LrSchedule: epochs must be >= 1");
}

double LrSchedule::at(std::size_t epoch) const {
  if (epoch >= epochs) throw std::out_of_range("LrSchedule: epoch out of range");
  if (epochs == 1) return lr_start;
  const double f = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return lr_start * std::pow(lr_end / lr_start, f);
}

}  // namespace npnorm
