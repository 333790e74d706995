#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdtc/autodiff.hpp"
#include "sdtc/checkpoint.hpp"

namespace sdtc {

struct Extent2 {
  std::size_t rows = 1;
  std::size_t cols = 1;
  friend bool operator==(const Extent2&, const Extent2&) = default;
};

struct FnnLayer {
  std::size_t neurons = 0;
  double dropout = 0.0;
  friend bool operator==(const FnnLayer&, const FnnLayer&) = default;
};

/// Network shape. Field names follow the layer/parameter names of the
/// published configuration tables (see configs/ for literal transcriptions).
struct ModelConfig {
  std::size_t window_length = 0;  // L, frame rows
  std::size_t channels = 0;       // J+P, frame columns

  std::size_t filters = 0;  // M
  Extent2 conv_kernel{1, 2};
  Extent2 conv_stride{1, 2};

  std::size_t capsule_dim = 0;       // D
  std::size_t capsule_channels = 0;  // 0: filters / D
  Extent2 capsule_kernel{1, 0};      // cols 0: span the whole remaining width
  Extent2 capsule_stride{1, 1};

  std::size_t num_advanced = 0;  // N_adv
  std::size_t advanced_dim = 0;  // D_adv
  std::size_t routing_iterations = 3;

  bool use_lstm = true;
  std::size_t lstm_units = 16;
  std::size_t sequence_length = 5;  // S frames per sample

  std::vector<FnnLayer> fnn{{200, 0.2}, {100, 0.2}};
  std::string fnn_activation = "relu";
  double output_scale = 1.0;  // multiplies the final linear unit

  /// Throws ConfigError listing every violated constraint.
  void validate() const;

  Extent2 conv_output() const;
  std::size_t basic_channels() const;
  Extent2 basic_kernel() const;  // with the whole-width default resolved
  Extent2 basic_output() const;
  std::size_t num_basic_capsules() const;
  std::size_t head_input() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& doc);

// ---- capsule primitives on plain values ---------------------------------------

std::vector<double> squash(std::span<const double> s);

struct RoutingState {
  Tensor logits;    // [I, J], after the last agreement update
  Tensor coupling;  // [I, J], coefficients that produced the returned outputs
};

struct RoutingResult {
  Tensor outputs;  // [J, Da]
  RoutingState state;
};

/// Routing-by-agreement over predictions [I, J, Da]. Logits start at zero.
RoutingResult dynamic_routing(const Tensor& predictions, std::size_t iterations);

// ---- parameters ---------------------------------------------------------------------

ParameterSet init_parameters(const ModelConfig& config, std::mt19937_64& rng);
/// Throws ShapeError if a parameter is missing or mis-shaped for `config`.
void check_parameters(const ModelConfig& config, const ParameterSet& params);

/// Parameters recorded on a tape as differentiable variables.
class BoundParameters {
 public:
  BoundParameters(Tape& tape, const ParameterSet& params);
  Var operator[](const std::string& name) const;
  /// Gradients after tape.backward(), keyed like the parameter set.
  ParameterSet gradients() const;

 private:
  Tape* tape_;
  std::map<std::string, Var> vars_;
};

// ---- forward pass -----------------------------------------------------------------

enum class Mode { training, inference };

struct ForwardOptions {
  Mode mode = Mode::inference;
  std::mt19937_64* rng = nullptr;          // dropout masks; required in training mode with dropout
  const Tensor* frozen_coupling = nullptr;  // [B*S, I, J]; replaces routing when set
  Tensor* coupling_out = nullptr;           // receives the coefficients used, [B*S, I, J]
};

/// tanh(conv(frames)). frames: [N, L, C, 1] -> [N, H', W', M].
Var conv_features(const ModelConfig& config, const BoundParameters& params, Var frames);
/// Grouped capsule convolution, flattened to [N, I, D] and squashed.
Var build_basic_capsules(const ModelConfig& config, const BoundParameters& params, Var feature_maps);
/// Routing over basic capsules [N, I, D] -> advanced capsules [N, N_adv, D_adv].
/// Coupling coefficients are computed on values and enter the graph as constants.
Var advanced_capsules(const ModelConfig& config, const BoundParameters& params, Var basic, const ForwardOptions& options);
/// Many-to-one LSTM over sequence [B, S, F]; returns the last hidden state [B, H].
Var lstm_forward(const BoundParameters& params, Var sequence, std::size_t units);
/// FNN stack ending in one linear unit: [B, F] -> [B, 1].
Var regression_head(const ModelConfig& config, const BoundParameters& params, Var hidden, const ForwardOptions& options);

/// frames: [B, S, L, C] -> RUL estimates [B, 1].
Var model_forward(Tape& tape, const ModelConfig& config, const BoundParameters& params, const Tensor& frames,
                  const ForwardOptions& options);

/// Inference-mode predictions, one per sample of `frames` [B, S, L, C].
std::vector<double> predict(const ModelConfig& config, const ParameterSet& params, const Tensor& frames);

}  // namespace sdtc
