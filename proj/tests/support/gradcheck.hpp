#pragma once
// Finite-difference comparison for graphs built on the library tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "sdtc/autodiff.hpp"

namespace gradcheck {

using Builder = std::function<sdtc::Var(sdtc::Tape&, const std::vector<sdtc::Var>&)>;

struct Outcome {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

/// Relative error with an absolute floor so near-zero gradients compare absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double evaluate(const Builder& build, const std::vector<sdtc::Tensor>& inputs) {
  sdtc::Tape tape;
  std::vector<sdtc::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return build(tape, vars).value().item();
}

/// Compares every input coordinate's analytic gradient with a central difference.
inline Outcome check(const Builder& build, const std::vector<sdtc::Tensor>& inputs, double eps = 1e-5) {
  sdtc::Tape tape;
  std::vector<sdtc::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  tape.backward(build(tape, vars));

  Outcome out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const sdtc::Tensor analytic = tape.grad(vars[k]);
    auto f = [&](const std::vector<double>& x) {
      auto moved = inputs;
      std::copy(x.begin(), x.end(), moved[k].values().begin());
      return evaluate(build, moved);
    };
    const auto& v = inputs[k].values();
    const auto numeric = oracle::numeric_gradient(f, std::vector<double>(v.begin(), v.end()), eps);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      out.max_relative_error = std::max(out.max_relative_error, relative_error(analytic[i], numeric[i]));
      ++out.checked;
    }
  }
  return out;
}

inline sdtc::Tensor random_tensor(sdtc::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  sdtc::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& x : t.values()) x = u(rng);
  return t;
}

}  // namespace gradcheck
