#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace sdtc {

/// Samples in rows, channels in columns.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ChannelMask = std::vector<bool>;

/// One unit's trajectory. Rows [0, change_point) are the normal stage; the
/// rest is the degradation stage. change_point == length() means all-normal.
struct RunToFailureSeries {
  int unit_id = 0;
  Matrix sensors;   // K_c x J, engineering units
  Matrix settings;  // K_c x S operating settings (may have zero columns)
  std::size_t change_point = 0;
  std::string tag;  // material / condition tag
  /// Explicit per-sample labels. When empty, labels follow the piece-wise health index.
  std::vector<double> labels;
  /// True RUL after the last sample (truncated test units); 0 for run-to-failure.
  double final_rul = 0.0;
  /// 1-based sample indices at which the unit is scored; empty means the last sample.
  std::vector<std::size_t> evaluation_points;

  std::size_t length() const { return static_cast<std::size_t>(sensors.rows()); }
  std::size_t channels() const { return static_cast<std::size_t>(sensors.cols()); }
};

struct NormalizationStats {
  Vector mean;
  Vector stddev;
};

/// Generalized eigen-solution of the slowness problem, columns ordered slowest first.
struct SlowFeatureModel {
  Matrix weights;   // J x J, column i is omega_i
  Vector slowness;  // J, ascending
  std::size_t num_slow = 0;
  double ridge = 0.0;

  Matrix slow_subspace() const { return weights.leftCols(static_cast<Eigen::Index>(num_slow)); }
  Matrix residual_subspace() const {
    return weights.rightCols(weights.cols() - static_cast<Eigen::Index>(num_slow));
  }
};

struct FrameInfo {
  int unit_id = 0;
  std::size_t end_index = 0;  // 1-based time index of the frame's last row
  double label = 0.0;
};

/// Sliding-window frames, each window x channels, stored contiguously.
class FrameBatch {
 public:
  FrameBatch() = default;
  FrameBatch(std::size_t window, std::size_t channels) : window_(window), channels_(channels) {}

  std::size_t window() const noexcept { return window_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return info_.size(); }
  bool empty() const noexcept { return info_.empty(); }
  std::size_t frame_size() const noexcept { return window_ * channels_; }

  std::span<const double> frame(std::size_t i) const {
    return {data_.data() + i * frame_size(), frame_size()};
  }
  const FrameInfo& info(std::size_t i) const { return info_[i]; }
  const std::vector<FrameInfo>& infos() const noexcept { return info_; }

  void append(std::span<const double> frame, FrameInfo info);
  void append(const FrameBatch& other);

  /// Indices i such that frames i-length+1..i are consecutive frames of one unit.
  std::vector<std::size_t> sequence_ends(std::size_t length) const;

  /// Frames whose unit id is in `units`, order preserved.
  FrameBatch subset(std::span<const int> units) const;

 private:
  std::size_t window_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> data_;
  std::vector<FrameInfo> info_;
};

// ---- channel screening and normalization ---------------------------------

ChannelMask drop_constant_channels(std::span<const RunToFailureSeries> series, double tolerance);
Matrix apply_mask(const Matrix& m, const ChannelMask& mask);

NormalizationStats fit_normalizer(std::span<const Matrix> normal_segments, double min_stddev = 1e-12);
Matrix apply_normalizer(const Matrix& m, const NormalizationStats& stats);
Matrix invert_normalizer(const Matrix& m, const NormalizationStats& stats);

// ---- slow feature analysis -----------------------------------------------

/// Default ridge: 1e-12 * trace(covariance) / J.
SlowFeatureModel fit_sfa(std::span<const Matrix> normal_segments, std::optional<double> ridge = std::nullopt);

/// Largest relative gap lambda[i+1]/lambda[i] over the slow half of the spectrum; first index wins ties.
std::size_t select_num_slow_features(std::span<const double> slowness);

Matrix project_slow_features(const Matrix& normalized, const SlowFeatureModel& model);
Matrix project_residual_features(const Matrix& normalized, const SlowFeatureModel& model);

// ---- window length ---------------------------------------------------------

/// Biased sample autocorrelation rho(0..max_lag), rho(0) = 1.
std::vector<double> sample_acf(std::span<const double> series, std::size_t max_lag);
/// Autocorrelation pooled over several segments; lag pairs never straddle segments.
std::vector<double> pooled_acf(std::span<const std::vector<double>> segments, std::size_t max_lag);

struct WindowSelection {
  std::size_t length = 0;
  bool within_band = true;  // false: no lag fell inside the band, length == max_lag
};

/// Smallest lag L >= 1 with |rho(L)| < 2/sqrt(sample_count).
WindowSelection select_window_length(std::span<const double> acf, std::size_t sample_count);

// ---- labels and slicing ----------------------------------------------------

/// y(k), k = 1..length: rul_max up to the change point, then decreasing by one per
/// sample, clipped below at 0. Element k-1 holds y(k).
std::vector<double> piecewise_rul_labels(std::size_t length, std::size_t change_point, double rul_max);

/// Frames of hybrid [sensors, slow features], each labelled by the label at its last row.
FrameBatch fuse_and_slice(const Matrix& sensors, const Matrix& slow, std::span<const double> labels,
                          std::size_t window, std::size_t stride, int unit_id);

// ---- fitted pipeline -------------------------------------------------------

/// Operating-condition key used for per-condition normalization.
std::string condition_key(const Eigen::Ref<const Eigen::RowVectorXd>& settings);

struct FeaturePipelineOptions {
  double constant_tolerance = 1e-2;
  bool per_condition = false;
  std::optional<double> ridge;
  std::size_t num_slow_features = 0;  // 0: select by spectral gap
  std::size_t window_length = 0;      // 0: select by autocorrelation
  std::size_t max_lag = 200;
};

/// Everything fitted on training data that later stages apply unchanged to new data.
struct FeaturePipeline {
  ChannelMask mask;
  std::vector<std::string> condition_keys;  // empty: pooled statistics
  std::vector<NormalizationStats> stats;    // one per condition key, or one pooled
  SlowFeatureModel sfa;
  std::size_t window_length = 0;
  bool window_within_band = true;
  std::vector<double> acf;  // of the first slow feature over degradation data

  std::size_t retained_channels() const;
  Matrix normalize(const RunToFailureSeries& series) const;
  /// [normalized sensors, slow features] when `with_slow`, else normalized sensors only.
  Matrix hybrid(const RunToFailureSeries& series, bool with_slow = true) const;
};

FeaturePipeline fit_feature_pipeline(std::span<const RunToFailureSeries> training,
                                     const FeaturePipelineOptions& options);

/// Labels of a series: explicit labels if present, else the piece-wise health index.
std::vector<double> series_labels(const RunToFailureSeries& series, double rul_max);

/// Named-array document in the checkpoint format.
nlohmann::json to_json(const FeaturePipeline& pipeline);
FeaturePipeline feature_pipeline_from_json(const nlohmann::json& doc);

}  // namespace sdtc
