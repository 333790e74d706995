#pragma once
// The small end-to-end configuration used for gradient and smoke checks.

#include <random>
#include <vector>

#include "sdtc/network.hpp"

namespace tiny {

inline sdtc::ModelConfig config() {
  sdtc::ModelConfig c;
  c.window_length = 6;
  c.channels = 4;
  c.filters = 8;
  c.conv_kernel = {1, 2};
  c.conv_stride = {1, 2};
  c.capsule_dim = 2;
  c.num_advanced = 2;
  c.advanced_dim = 4;
  c.routing_iterations = 3;
  c.lstm_units = 4;
  c.sequence_length = 3;
  return c;
}

inline sdtc::Tensor frames(std::size_t batch, const sdtc::ModelConfig& c, std::mt19937_64& rng) {
  sdtc::Tensor t({batch, c.sequence_length, c.window_length, c.channels});
  std::normal_distribution<double> g;
  for (auto& v : t.values()) v = g(rng);
  return t;
}

/// Initialized shapes with every entry redrawn from N(0, 0.5). The default initialization
/// leaves capsule outputs near zero, which puts ReLU pre-activations within a finite-difference
/// step of their kink; a generic random point avoids that.
inline sdtc::ParameterSet random_parameters(const sdtc::ModelConfig& c, std::mt19937_64& rng) {
  auto p = sdtc::init_parameters(c, rng);
  std::normal_distribution<double> g(0.0, 0.5);
  for (auto& [name, t] : p)
    for (auto& v : t.values()) v = g(rng);
  return p;
}

struct Evaluation {
  double loss = 0.0;
  sdtc::ParameterSet grads;
  sdtc::Tensor coupling;
};

/// mean((y - target)^2) and its gradient. With `frozen` set the routing coefficients are
/// taken as given, which makes the loss exactly the function the gradient describes.
inline Evaluation loss(const sdtc::ModelConfig& c, const sdtc::ParameterSet& params, const sdtc::Tensor& x,
                       const std::vector<double>& targets, const sdtc::Tensor* frozen, bool with_grad) {
  sdtc::Tape tape;
  sdtc::BoundParameters bound(tape, params);
  Evaluation out;
  sdtc::ForwardOptions opt;
  opt.frozen_coupling = frozen;
  opt.coupling_out = &out.coupling;
  sdtc::Var y = sdtc::model_forward(tape, c, bound, x, opt);
  sdtc::Var t = tape.constant(sdtc::Tensor({targets.size(), 1}, targets));
  sdtc::Var diff = sdtc::ad::sub(y, t);
  sdtc::Var l = sdtc::ad::mean(sdtc::ad::mul(diff, diff));
  out.loss = l.value().item();
  if (with_grad) {
    tape.backward(l);
    out.grads = bound.gradients();
  }
  return out;
}

}  // namespace tiny
