#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdtc/data.hpp"
#include "sdtc/evaluation.hpp"
#include "sdtc/features.hpp"
#include "sdtc/network.hpp"
#include "sdtc/training.hpp"

namespace sdtc {

inline constexpr const char* kVersion = "0.1.0";

/// Everything a command needs. Model fields left at 0 are derived from the fitted features.
struct RunConfig {
  std::string dataset_name = "SYN";
  std::string dataset_format = "cmapss";  // cmapss | milling
  double rul_max = 125.0;                 // 0: largest training label (milling)

  FeaturePipelineOptions features;
  ModelConfig model;
  TrainConfig training;
  GridOptions tune;
  std::size_t ablation_repeats = 1;
  SyntheticSpec synthetic;

  bool clip = true;
  std::vector<double> error_bands = default_error_bands();
  bool score_all_points = false;

  RunConfig();
  /// Throws ConfigError listing every problem.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& config);
/// Strict: unknown keys and wrong types are reported as problems.
RunConfig run_config_from_json(const nlohmann::json& doc);

/// Applies dotted-path overrides ("training.batch_size=32") to a config document. Values are
/// parsed as JSON when possible and kept as strings otherwise.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides);

/// FNV-1a 64 of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& doc);

struct RunSpec {
  std::string command;
  std::filesystem::path data_dir = ".";
  std::optional<std::filesystem::path> config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  std::size_t jobs = 1;
  std::string variant;  // ablate: one variant or empty for all; train: defaults to full
  std::optional<std::size_t> epochs;
  bool no_clip = false;
};

/// defaults < config file < --set overrides < dedicated flags.
struct ResolvedConfig {
  RunConfig config;
  nlohmann::json document;
};
ResolvedConfig resolve_config(const RunSpec& spec);

/// Training and test units of the configured dataset under `data_dir`.
Dataset load_dataset(const RunConfig& config, const std::filesystem::path& data_dir);

/// Model for the variant given the fitted features.
ModelConfig resolve_model(const RunConfig& config, const FeaturePipeline& pipeline, Variant variant);

void cmd_synth(const RunSpec& spec);
void cmd_fit_features(const RunSpec& spec);
void cmd_train(const RunSpec& spec);
void cmd_evaluate(const RunSpec& spec);
void cmd_tune(const RunSpec& spec);
void cmd_ablate(const RunSpec& spec);

/// Dispatches on spec.command.
void run_command(const RunSpec& spec);

}  // namespace sdtc
