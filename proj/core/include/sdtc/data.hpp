#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sdtc/features.hpp"

namespace sdtc {

struct DatasetManifest {
  std::string name;
  std::size_t train_units = 0;
  std::size_t test_units = 0;
  std::vector<std::string> channel_names;
  std::size_t operating_conditions = 0;
  double rul_max = 125.0;
  std::vector<std::string> tags;  // distinct material / condition tags, sorted
};

struct Dataset {
  std::vector<RunToFailureSeries> train;
  std::vector<RunToFailureSeries> test;
  DatasetManifest manifest;
};

nlohmann::json to_json(const DatasetManifest& manifest);

// ---- C-MAPSS text format ---------------------------------------------------------------

inline constexpr std::size_t kCmapssSettings = 3;
inline constexpr std::size_t kCmapssSensors = 21;

/// Parses train/test/RUL files. Training units get change_point = max(0, K_c - rul_max);
/// test units carry final_rul and explicit clipped labels.
Dataset load_cmapss(const std::filesystem::path& train, const std::filesystem::path& test,
                    const std::filesystem::path& rul, double rul_max, std::string name = "");

/// Looks for train_<name>.txt, test_<name>.txt and RUL_<name>.txt inside `dir`.
Dataset load_cmapss_dir(const std::filesystem::path& dir, const std::string& name, double rul_max);

/// Writes the three files in the same layout load_cmapss_dir expects. Series must have
/// kCmapssSettings settings columns (or none, written as zeros) and at most kCmapssSensors sensors;
/// missing sensor columns are written as zeros.
void write_cmapss(const std::filesystem::path& dir, const std::string& name, const Dataset& data);

// ---- milling CSV ---------------------------------------------------------------------------

inline constexpr std::size_t kMillingRunLength = 90;
inline constexpr double kWearThreshold = 0.45;

/// One series per case: runs concatenated in run order, the first run marked normal,
/// per-sample labels = runs remaining until wear first exceeds the threshold.
/// All cases land in `train`; use split_milling_protocol for the published split.
Dataset load_milling(const std::filesystem::path& csv, std::string name = "milling");

/// Remaining-run label per run given flank wear (NaN = unmeasured, interpolated).
std::vector<double> milling_run_labels(std::vector<double> wear);

/// First 9 cases of material 1 and first 2 of material 2 train; the rest test.
Dataset split_milling_protocol(Dataset all);

// ---- synthetic generator -----------------------------------------------------------------

struct SyntheticSpec {
  std::size_t channels = 8;                        // J
  std::vector<double> latent_periods{500.0, 300.0};  // one slow latent per entry
  std::size_t degrading_latent = 0;
  double degradation_slope = 0.04;  // latent units per sample after K_cp
  double noise_scale = 0.1;
  bool identity_mixing = false;  // requires channels == latent count
  std::size_t train_units = 20;
  std::size_t test_units = 5;
  std::size_t min_length = 260;
  std::size_t max_length = 340;
  double rul_max = 125.0;
  /// Test units are truncated this many samples (uniform range) before failure.
  std::size_t min_truncation = 10;
  std::size_t max_truncation = 100;

  /// Throws ConfigError listing violations.
  void validate() const;
};

nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& doc);

struct SyntheticDataset {
  Dataset data;
  Matrix mixing;  // latents x channels: observed = latents * mixing + noise
  /// Noise-free latents per unit, train units first then test units (untruncated).
  std::vector<Matrix> latents;
};

SyntheticDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// ---- splitting ------------------------------------------------------------------------------

/// Seeded partition by unit; validation gets round(fraction * n) units, at least one, leaving
/// at least one for training.
std::pair<std::vector<RunToFailureSeries>, std::vector<RunToFailureSeries>> split_units(
    const std::vector<RunToFailureSeries>& series, double validation_fraction, std::uint64_t seed);

}  // namespace sdtc
