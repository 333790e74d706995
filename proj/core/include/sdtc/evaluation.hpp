#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdtc/features.hpp"
#include "sdtc/network.hpp"

namespace sdtc {

inline constexpr int kReportSchemaVersion = 1;

double rmse(std::span<const double> predictions, std::span<const double> truths);
/// Sum of exp(-d/13)-1 for early (d<0) and exp(d/10)-1 for late estimates, d = pred - truth.
double scoring_function(std::span<const double> predictions, std::span<const double> truths);

/// Bands are [edges[i], edges[i+1]); values below edges.front() go to underflow and values
/// at or above edges.back() to overflow.
struct ErrorHistogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;  // edges.size() - 1 bands
  std::size_t underflow = 0;
  std::size_t overflow = 0;

  std::size_t total() const;
  friend bool operator==(const ErrorHistogram&, const ErrorHistogram&) = default;
};

ErrorHistogram error_distribution(std::span<const double> errors, std::span<const double> edges);

std::vector<double> default_error_bands();

struct UnitPrediction {
  int unit_id = 0;
  std::size_t index = 0;  // 1-based sample index scored
  double true_rul = 0.0;
  double pred_rul = 0.0;
  double error = 0.0;  // pred_rul - true_rul
  friend bool operator==(const UnitPrediction&, const UnitPrediction&) = default;
};

struct EvaluationReport {
  int schema_version = kReportSchemaVersion;
  std::string variant = "full";
  std::string dataset;
  std::uint64_t seed = 0;
  bool clipped = true;
  double rul_max = 0.0;
  std::vector<UnitPrediction> rows;
  double rmse = 0.0;
  double score = 0.0;
  ErrorHistogram histogram;
  friend bool operator==(const EvaluationReport&, const EvaluationReport&) = default;
};

/// Fills metrics and histogram from rows.
void summarize(EvaluationReport& report, std::span<const double> band_edges);

nlohmann::json to_json(const EvaluationReport& report);
EvaluationReport evaluation_report_from_json(const nlohmann::json& doc);
/// CSV: unit_id,true_rul,pred_rul,error
std::string report_csv(const EvaluationReport& report);
/// Writes <stem>.json and <stem>.csv.
void emit_report(const EvaluationReport& report, const std::filesystem::path& stem);
EvaluationReport parse_report(const std::filesystem::path& json_path);

// ---- model application ---------------------------------------------------------------

/// [n, S, L, C] input whose sample i is the S frames ending at 1-based sample end_points[i].
/// Rows before the first sample repeat the first sample.
Tensor sequence_input(const Matrix& hybrid, std::span<const std::size_t> end_points, std::size_t window,
                      std::size_t sequence_length);

struct ScoringOptions {
  bool with_slow = true;
  bool clip = true;
  double rul_max = 125.0;
  std::size_t batch_size = 256;
  /// Score every sample index instead of the evaluation points.
  bool all_points = false;
};

/// One prediction per evaluation point of each series (the last sample when none are listed).
std::vector<UnitPrediction> score_series(const ModelConfig& config, const ParameterSet& params,
                                         const FeaturePipeline& pipeline, std::span<const RunToFailureSeries> series,
                                         const ScoringOptions& options);

/// Last-sample prediction for every test unit.
std::vector<UnitPrediction> last_point_predictions(const ModelConfig& config, const ParameterSet& params,
                                                   const FeaturePipeline& pipeline,
                                                   std::span<const RunToFailureSeries> series,
                                                   const ScoringOptions& options);

}  // namespace sdtc
