#pragma once

#include <cstdint>

#include "sdtc/checkpoint.hpp"

namespace sdtc {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment accumulators per parameter, zero until the first step.
class AdamState {
 public:
  explicit AdamState(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const noexcept { return options_; }
  std::uint64_t step() const noexcept { return step_; }
  const ParameterSet& first_moments() const noexcept { return m_; }
  const ParameterSet& second_moments() const noexcept { return v_; }

 private:
  friend void adam_step(ParameterSet&, const ParameterSet&, AdamState&);

  AdamOptions options_;
  std::uint64_t step_ = 0;
  ParameterSet m_;
  ParameterSet v_;
};

/// One bias-corrected Adam update of every parameter in `params`.
/// `grads` must hold a finite gradient of identical shape for each parameter.
void adam_step(ParameterSet& params, const ParameterSet& grads, AdamState& state);

}  // namespace sdtc
