#include "sdtc/adam.hpp"

#include <cmath>

#include "sdtc/error.hpp"

namespace sdtc {

void adam_step(ParameterSet& params, const ParameterSet& grads, AdamState& state) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ShapeError("adam_step: no gradient for '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ShapeError("adam_step: gradient shape " + shape_string(it->second.shape()) + " != parameter shape " +
                       shape_string(p.shape()) + " for '" + name + "'");
    }
    if (!it->second.all_finite()) throw NumericError("adam_step: non-finite gradient for '" + name + "'");
  }

  const AdamOptions& o = state.options_;
  const auto t = static_cast<double>(state.step_ + 1);
  const double correction1 = 1.0 - std::pow(o.beta1, t);
  const double correction2 = 1.0 - std::pow(o.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    auto mit = state.m_.try_emplace(name, Tensor::zeros(p.shape())).first;
    auto vit = state.v_.try_emplace(name, Tensor::zeros(p.shape())).first;
    if (mit->second.shape() != p.shape()) throw ShapeError("adam_step: moment shape changed for '" + name + "'");
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] -= o.learning_rate * m_hat / (std::sqrt(v_hat) + o.epsilon);
    }
  }
  ++state.step_;
}

}  // namespace sdtc
