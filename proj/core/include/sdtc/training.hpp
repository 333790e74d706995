#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdtc/adam.hpp"
#include "sdtc/data.hpp"
#include "sdtc/evaluation.hpp"
#include "sdtc/features.hpp"
#include "sdtc/network.hpp"

namespace sdtc {

/// Stage-specific seed derived from one master seed (splitmix64 of seed ^ hash(stage)).
std::uint64_t sub_seed(std::uint64_t seed, std::string_view stage);

struct TrainConfig {
  std::size_t epochs = 80;
  std::size_t batch_size = 64;
  std::size_t routing_iterations = 0;  // 0: keep the model's value
  AdamOptions adam;
  std::size_t patience = 10;
  double min_delta = 1e-4;
  double validation_fraction = 0.1;
  std::size_t sample_stride = 1;  // keep every n-th training sequence
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainReport {
  std::vector<double> train_loss;       // per epoch, mean squared error
  std::vector<double> validation_loss;  // per epoch, mean squared error
  std::size_t best_epoch = 0;           // 1-based
  double seconds = 0.0;
  std::size_t parameter_count = 0;
  bool stopped_early = false;
};

/// Deterministic report fields (no wall clock).
nlohmann::json to_json(const TrainReport& report);
std::string train_report_csv(const TrainReport& report);

struct TrainResult {
  ParameterSet params;  // from the best validation epoch
  TrainReport report;
};

/// Samples are S consecutive frames of one unit (FrameBatch::sequence_ends); the target is the
/// label of the last frame.
TrainResult train(const ModelConfig& model, const FrameBatch& training, const FrameBatch& validation,
                  const TrainConfig& config);
/// Splits `frames` by unit id using config.validation_fraction first.
TrainResult train(const ModelConfig& model, const FrameBatch& frames, const TrainConfig& config);

/// [n, S, L, C] inputs and targets for the sequences ending at `ends`.
Tensor gather_sequences(const FrameBatch& frames, std::span<const std::size_t> ends, std::size_t sequence_length);
std::vector<double> gather_targets(const FrameBatch& frames, std::span<const std::size_t> ends);

/// Inference predictions for every complete sequence of `frames`; returns (predictions, targets).
std::pair<std::vector<double>, std::vector<double>> predict_frames(const ModelConfig& model, const ParameterSet& params,
                                                                   const FrameBatch& frames, std::size_t batch_size = 256);

/// Capsule and routing defaults from the slow-feature split. Fields not governed by the
/// rules (filters, LSTM units, FNN) are copied from `base`.
ModelConfig derive_hyperparams(std::size_t num_slow, std::size_t num_sensors, std::size_t window_length,
                               const ModelConfig& base = {});

/// Hybrid frames of all series under a fitted pipeline.
FrameBatch build_frames(const FeaturePipeline& pipeline, std::span<const RunToFailureSeries> series, bool with_slow,
                        double rul_max);

// ---- sensitivity grid ----------------------------------------------------------------------

struct GridCell {
  std::size_t filters = 0;
  std::size_t lstm_units = 0;
  double rmse = 0.0;
  double score = 0.0;
  std::size_t best_epoch = 0;
};

struct GridResult {
  GridCell best;
  std::vector<GridCell> surface;  // evaluation order
};

struct GridOptions {
  std::vector<std::size_t> filters{8, 16, 24, 32, 40, 48, 56, 64};
  std::vector<std::size_t> lstm_units{8, 16, 24, 32};
  bool stop_without_improvement = true;
  std::size_t jobs = 1;
  double rul_max = 125.0;
};

/// One training run per cell with a shared seed, scored on validation RMSE (SF breaks ties).
GridResult sensitivity_grid(const ModelConfig& base, const FrameBatch& training, const FrameBatch& validation,
                            const TrainConfig& config, const GridOptions& options);

nlohmann::json to_json(const GridResult& grid);
std::string grid_surface_csv(const GridResult& grid);

// ---- ablation ------------------------------------------------------------------------------

enum class Variant { full, no_sfa, no_lstm, plain_capsnet };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);
std::vector<Variant> all_variants();

/// Model configuration of a variant: no-sfa drops the slow channels, no-lstm uses single frames.
ModelConfig variant_config(const ModelConfig& full, Variant v, std::size_t num_slow);
bool variant_uses_slow(Variant v);

struct AblationInput {
  std::span<const RunToFailureSeries> train;  // training units, split for validation internally
  std::span<const RunToFailureSeries> test;
  const FeaturePipeline* pipeline = nullptr;
  ModelConfig model;  // the full variant
  TrainConfig training;
  ScoringOptions scoring;
  std::vector<double> error_bands = default_error_bands();
  std::string dataset;
};

struct AblationOutcome {
  EvaluationReport report;
  TrainReport training;
  ModelConfig model;
  ParameterSet params;
};

/// Trains and evaluates one variant. Identical seeds and splits across variants.
AblationOutcome ablation_run(Variant variant, const AblationInput& input);

}  // namespace sdtc
