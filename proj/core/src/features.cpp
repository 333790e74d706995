#include "sdtc/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include <spdlog/spdlog.h>

#include "sdtc/checkpoint.hpp"
#include "sdtc/error.hpp"

namespace sdtc {

// ---- FrameBatch -----------------------------------------------------------

void FrameBatch::append(std::span<const double> frame, FrameInfo info) {
  if (frame.size() != frame_size()) {
    throw ShapeError("FrameBatch: frame of " + std::to_string(frame.size()) + " values, expected " +
                     std::to_string(frame_size()));
  }
  data_.insert(data_.end(), frame.begin(), frame.end());
  info_.push_back(info);
}

void FrameBatch::append(const FrameBatch& other) {
  if (other.empty()) return;
  if (empty() && window_ == 0) {
    *this = other;
    return;
  }
  if (other.window_ != window_ || other.channels_ != channels_) {
    throw ShapeError("FrameBatch: cannot append frames of a different shape");
  }
  data_.insert(data_.end(), other.data_.begin(), other.data_.end());
  info_.insert(info_.end(), other.info_.begin(), other.info_.end());
}

std::vector<std::size_t> FrameBatch::sequence_ends(std::size_t length) const {
  std::vector<std::size_t> ends;
  if (length == 0) return ends;
  std::size_t run = 0;
  for (std::size_t i = 0; i < info_.size(); ++i) {
    const bool continues = i > 0 && info_[i].unit_id == info_[i - 1].unit_id &&
                           info_[i].end_index > info_[i - 1].end_index;
    run = continues ? run + 1 : 1;
    if (run >= length) ends.push_back(i);
  }
  return ends;
}

FrameBatch FrameBatch::subset(std::span<const int> units) const {
  FrameBatch out(window_, channels_);
  for (std::size_t i = 0; i < info_.size(); ++i) {
    if (std::find(units.begin(), units.end(), info_[i].unit_id) != units.end()) out.append(frame(i), info_[i]);
  }
  return out;
}

// ---- channel screening and normalization ------------------------------------

ChannelMask drop_constant_channels(std::span<const RunToFailureSeries> series, double tolerance) {
  if (series.empty()) throw DataError("drop_constant_channels: empty collection");
  const auto channels = static_cast<Eigen::Index>(series.front().channels());
  Vector sum = Vector::Zero(channels), sumsq = Vector::Zero(channels);
  double count = 0.0;
  // Shift by the first row to keep the one-pass variance well conditioned.
  const Eigen::RowVectorXd shift = series.front().sensors.row(0);
  for (const auto& s : series) {
    if (s.sensors.cols() != channels) throw DataError("drop_constant_channels: channel count differs between series");
    for (Eigen::Index r = 0; r < s.sensors.rows(); ++r) {
      const Eigen::RowVectorXd d = s.sensors.row(r) - shift;
      sum += d.transpose();
      sumsq += d.transpose().cwiseProduct(d.transpose());
    }
    count += static_cast<double>(s.sensors.rows());
  }
  ChannelMask mask(static_cast<std::size_t>(channels));
  bool any = false;
  for (Eigen::Index c = 0; c < channels; ++c) {
    const double mean = sum[c] / count;
    const double var = std::max(0.0, sumsq[c] / count - mean * mean);
    mask[static_cast<std::size_t>(c)] = std::sqrt(var) >= tolerance;
    any = any || mask[static_cast<std::size_t>(c)];
  }
  if (!any) throw DataError("drop_constant_channels: every channel is constant");
  return mask;
}

Matrix apply_mask(const Matrix& m, const ChannelMask& mask) {
  if (static_cast<std::size_t>(m.cols()) != mask.size()) {
    throw ShapeError("apply_mask: matrix has " + std::to_string(m.cols()) + " channels, mask " +
                     std::to_string(mask.size()));
  }
  const auto kept = static_cast<Eigen::Index>(std::count(mask.begin(), mask.end(), true));
  Matrix out(m.rows(), kept);
  Eigen::Index col = 0;
  for (std::size_t c = 0; c < mask.size(); ++c) {
    if (mask[c]) out.col(col++) = m.col(static_cast<Eigen::Index>(c));
  }
  return out;
}

NormalizationStats fit_normalizer(std::span<const Matrix> normal_segments, double min_stddev) {
  if (normal_segments.empty()) throw DataError("fit_normalizer: no normal data");
  const Eigen::Index channels = normal_segments.front().cols();
  Vector sum = Vector::Zero(channels);
  double count = 0.0;
  for (const auto& seg : normal_segments) {
    if (seg.cols() != channels) throw ShapeError("fit_normalizer: channel count differs between segments");
    sum += seg.colwise().sum().transpose();
    count += static_cast<double>(seg.rows());
  }
  if (count < 2.0) throw DataError("fit_normalizer: need at least 2 normal samples per channel");
  NormalizationStats stats;
  stats.mean = sum / count;
  Vector sq = Vector::Zero(channels);
  for (const auto& seg : normal_segments) {
    sq += (seg.rowwise() - stats.mean.transpose()).array().square().colwise().sum().matrix().transpose();
  }
  stats.stddev = (sq / count).cwiseSqrt();
  for (Eigen::Index c = 0; c < channels; ++c) {
    if (!(stats.stddev[c] > min_stddev)) {
      throw DataError("fit_normalizer: channel " + std::to_string(c) + " has zero variance in the normal stage");
    }
  }
  return stats;
}

Matrix apply_normalizer(const Matrix& m, const NormalizationStats& stats) {
  if (m.cols() != stats.mean.size()) {
    throw ShapeError("apply_normalizer: matrix has " + std::to_string(m.cols()) + " channels, statistics " +
                     std::to_string(stats.mean.size()));
  }
  return (m.rowwise() - stats.mean.transpose()).array().rowwise() / stats.stddev.transpose().array();
}

Matrix invert_normalizer(const Matrix& m, const NormalizationStats& stats) {
  if (m.cols() != stats.mean.size()) throw ShapeError("invert_normalizer: channel mismatch");
  return (m.array().rowwise() * stats.stddev.transpose().array()).matrix().rowwise() + stats.mean.transpose();
}

// ---- slow feature analysis ---------------------------------------------------

SlowFeatureModel fit_sfa(std::span<const Matrix> normal_segments, std::optional<double> ridge) {
  if (normal_segments.empty()) throw DataError("fit_sfa: no normal data");
  const Eigen::Index j = normal_segments.front().cols();
  Eigen::Index n = 0, n_diff = 0;
  Vector mean = Vector::Zero(j);
  for (const auto& seg : normal_segments) {
    if (seg.cols() != j) throw ShapeError("fit_sfa: channel count differs between segments");
    n += seg.rows();
    n_diff += std::max<Eigen::Index>(seg.rows() - 1, 0);
    mean += seg.colwise().sum().transpose();
  }
  if (n < j + 2) {
    throw DataError("fit_sfa: need at least J+2 = " + std::to_string(j + 2) + " samples, got " + std::to_string(n));
  }
  if (n_diff < 1) throw DataError("fit_sfa: no temporal differences available");
  mean /= static_cast<double>(n);

  Matrix cov = Matrix::Zero(j, j);
  Matrix cov_diff = Matrix::Zero(j, j);
  for (const auto& seg : normal_segments) {
    const Matrix centered = seg.rowwise() - mean.transpose();
    cov.noalias() += centered.transpose() * centered;
    if (seg.rows() > 1) {
      // Differences stay inside each unit's segment.
      const Matrix diff = seg.bottomRows(seg.rows() - 1) - seg.topRows(seg.rows() - 1);
      cov_diff.noalias() += diff.transpose() * diff;
    }
  }
  cov /= static_cast<double>(n);
  cov_diff /= static_cast<double>(n_diff);

  const double applied_ridge = ridge.value_or(1e-12 * cov.trace() / static_cast<double>(j));
  if (applied_ridge < 0.0) throw DataError("fit_sfa: ridge must be non-negative");
  cov.diagonal().array() += applied_ridge;

  Eigen::SelfAdjointEigenSolver<Matrix> cov_eig(cov);
  if (cov_eig.info() != Eigen::Success) throw NumericError("fit_sfa: covariance eigendecomposition failed");
  const Vector& d = cov_eig.eigenvalues();
  const double top = d.maxCoeff();
  if (!(d.minCoeff() > top * 1e-14) || !(top > 0.0)) {
    throw NumericError("fit_sfa: covariance is singular beyond ridge repair");
  }
  const Matrix whitener = cov_eig.eigenvectors() * d.cwiseSqrt().cwiseInverse().asDiagonal();
  Matrix whitened_diff = whitener.transpose() * cov_diff * whitener;
  whitened_diff = 0.5 * (whitened_diff + whitened_diff.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> diff_eig(whitened_diff);
  if (diff_eig.info() != Eigen::Success) throw NumericError("fit_sfa: slowness eigendecomposition failed");

  SlowFeatureModel model;
  model.ridge = applied_ridge;
  model.slowness = diff_eig.eigenvalues();  // ascending
  model.weights = whitener * diff_eig.eigenvectors();
  // Sign convention: the largest-magnitude weight of each direction is positive.
  for (Eigen::Index c = 0; c < j; ++c) {
    Eigen::Index arg = 0;
    model.weights.col(c).cwiseAbs().maxCoeff(&arg);
    if (model.weights(arg, c) < 0.0) model.weights.col(c) *= -1.0;
  }
  model.num_slow = static_cast<std::size_t>(j);
  return model;
}

std::size_t select_num_slow_features(std::span<const double> slowness) {
  if (slowness.size() < 2) throw DataError("select_num_slow_features: need at least 2 eigenvalues");
  for (double l : slowness) {
    if (!(l > 0.0)) throw DataError("select_num_slow_features: eigenvalues must be positive");
  }
  const std::size_t j = slowness.size();
  const std::size_t last = std::min(j - 1, std::max<std::size_t>(1, (j + 1) / 2));
  std::size_t best = 1;
  double best_ratio = -1.0;
  for (std::size_t i = 1; i <= last; ++i) {
    const double ratio = slowness[i] / slowness[i - 1];
    if (ratio > best_ratio) {
      best_ratio = ratio;
      best = i;
    }
  }
  return best;
}

Matrix project_slow_features(const Matrix& normalized, const SlowFeatureModel& model) {
  if (normalized.cols() != model.weights.rows()) {
    throw ShapeError("project_slow_features: matrix has " + std::to_string(normalized.cols()) +
                     " channels, model expects " + std::to_string(model.weights.rows()));
  }
  return normalized * model.slow_subspace();
}

Matrix project_residual_features(const Matrix& normalized, const SlowFeatureModel& model) {
  if (normalized.cols() != model.weights.rows()) throw ShapeError("project_residual_features: channel mismatch");
  return normalized * model.residual_subspace();
}

// ---- window length ----------------------------------------------------------

std::vector<double> pooled_acf(std::span<const std::vector<double>> segments, std::size_t max_lag) {
  std::size_t total = 0;
  double sum = 0.0;
  for (const auto& s : segments) {
    total += s.size();
    for (double v : s) sum += v;
  }
  if (total <= max_lag) {
    throw DataError("sample_acf: series of " + std::to_string(total) + " samples too short for max lag " +
                    std::to_string(max_lag));
  }
  const double mean = sum / static_cast<double>(total);
  double c0 = 0.0;
  for (const auto& s : segments) {
    for (double v : s) c0 += (v - mean) * (v - mean);
  }
  if (!(c0 > 0.0)) throw DataError("sample_acf: series has zero variance");
  std::vector<double> rho(max_lag + 1, 0.0);
  rho[0] = 1.0;
  for (std::size_t lag = 1; lag <= max_lag; ++lag) {
    double c = 0.0;
    for (const auto& s : segments) {
      for (std::size_t t = 0; t + lag < s.size(); ++t) c += (s[t] - mean) * (s[t + lag] - mean);
    }
    rho[lag] = c / c0;
  }
  return rho;
}

std::vector<double> sample_acf(std::span<const double> series, std::size_t max_lag) {
  const std::vector<double> one(series.begin(), series.end());
  return pooled_acf(std::span<const std::vector<double>>(&one, 1), max_lag);
}

WindowSelection select_window_length(std::span<const double> acf, std::size_t sample_count) {
  if (acf.size() < 2) throw DataError("select_window_length: need at least one lag");
  if (sample_count == 0) throw DataError("select_window_length: sample count must be positive");
  const double band = 2.0 / std::sqrt(static_cast<double>(sample_count));
  for (std::size_t lag = 1; lag < acf.size(); ++lag) {
    if (std::abs(acf[lag]) < band) return {lag, true};
  }
  spdlog::warn("no autocorrelation lag up to {} falls inside +/-{:.4g}; using the maximum lag", acf.size() - 1, band);
  return {acf.size() - 1, false};
}

// ---- labels and slicing --------------------------------------------------------

std::vector<double> piecewise_rul_labels(std::size_t length, std::size_t change_point, double rul_max) {
  if (change_point > length) throw DataError("piecewise_rul_labels: change point beyond series length");
  if (!(rul_max > 0.0)) throw DataError("piecewise_rul_labels: RUL_max must be positive");
  std::vector<double> y(length);
  for (std::size_t k = 1; k <= length; ++k) {
    const double v = k <= change_point ? rul_max : rul_max - static_cast<double>(k - change_point);
    y[k - 1] = std::max(0.0, v);
  }
  return y;
}

FrameBatch fuse_and_slice(const Matrix& sensors, const Matrix& slow, std::span<const double> labels,
                          std::size_t window, std::size_t stride, int unit_id) {
  if (window == 0 || stride == 0) throw DataError("fuse_and_slice: window and stride must be positive");
  if (slow.rows() != sensors.rows() && slow.cols() > 0) {
    throw ShapeError("fuse_and_slice: sensors and slow features have different sample counts");
  }
  const auto rows = static_cast<std::size_t>(sensors.rows());
  if (labels.size() != rows) throw ShapeError("fuse_and_slice: one label per sample required");
  const auto channels = static_cast<std::size_t>(sensors.cols() + slow.cols());
  FrameBatch batch(window, channels);
  if (rows < window) {
    spdlog::warn("unit {} has {} samples, fewer than window {}; skipped", unit_id, rows, window);
    return batch;
  }
  Matrix hybrid(sensors.rows(), static_cast<Eigen::Index>(channels));
  hybrid << sensors, slow;
  std::vector<double> frame(window * channels);
  for (std::size_t start = 0; start + window <= rows; start += stride) {
    for (std::size_t r = 0; r < window; ++r) {
      for (std::size_t c = 0; c < channels; ++c) {
        frame[r * channels + c] = hybrid(static_cast<Eigen::Index>(start + r), static_cast<Eigen::Index>(c));
      }
    }
    const std::size_t end = start + window;  // 1-based index of the last row
    batch.append(frame, FrameInfo{unit_id, end, labels[end - 1]});
  }
  return batch;
}

// ---- fitted pipeline ---------------------------------------------------------------

std::string condition_key(const Eigen::Ref<const Eigen::RowVectorXd>& settings) {
  // C-MAPSS operating regimes: altitude (kft), Mach number, throttle angle.
  static constexpr double kResolution[] = {1.0, 0.01, 1.0};
  std::string key;
  for (Eigen::Index i = 0; i < settings.size(); ++i) {
    const double res = i < 3 ? kResolution[i] : 1.0;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%.0f", i ? "/" : "", std::round(settings[i] / res));
    key += buf;
  }
  return key.empty() ? std::string("all") : key;
}

namespace {

// Row indices grouped by condition key.
std::map<std::string, std::vector<Eigen::Index>> rows_by_condition(const RunToFailureSeries& s, std::size_t rows) {
  std::map<std::string, std::vector<Eigen::Index>> groups;
  for (std::size_t r = 0; r < rows; ++r) {
    groups[condition_key(s.settings.row(static_cast<Eigen::Index>(r)))].push_back(static_cast<Eigen::Index>(r));
  }
  return groups;
}

}  // namespace

std::size_t FeaturePipeline::retained_channels() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

Matrix FeaturePipeline::normalize(const RunToFailureSeries& series) const {
  const Matrix masked = apply_mask(series.sensors, mask);
  if (condition_keys.empty()) return apply_normalizer(masked, stats.front());
  if (series.settings.rows() != series.sensors.rows()) {
    throw DataError("per-condition normalization needs operating settings for every sample");
  }
  Matrix out(masked.rows(), masked.cols());
  for (Eigen::Index r = 0; r < masked.rows(); ++r) {
    const std::string key = condition_key(series.settings.row(r));
    auto it = std::find(condition_keys.begin(), condition_keys.end(), key);
    if (it == condition_keys.end()) throw DataError("operating condition '" + key + "' unseen in training data");
    const auto& st = stats[static_cast<std::size_t>(it - condition_keys.begin())];
    out.row(r) = (masked.row(r) - st.mean.transpose()).array() / st.stddev.transpose().array();
  }
  return out;
}

Matrix FeaturePipeline::hybrid(const RunToFailureSeries& series, bool with_slow) const {
  const Matrix x = normalize(series);
  if (!with_slow) return x;
  const Matrix s = project_slow_features(x, sfa);
  Matrix out(x.rows(), x.cols() + s.cols());
  out << x, s;
  return out;
}

std::vector<double> series_labels(const RunToFailureSeries& series, double rul_max) {
  if (!series.labels.empty()) {
    if (series.labels.size() != series.length()) throw DataError("series labels do not match its length");
    return series.labels;
  }
  if (series.final_rul > 0.0) {
    std::vector<double> y(series.length());
    for (std::size_t k = 1; k <= y.size(); ++k) {
      y[k - 1] = std::min(rul_max, series.final_rul + static_cast<double>(y.size() - k));
    }
    return y;
  }
  return piecewise_rul_labels(series.length(), series.change_point, rul_max);
}

FeaturePipeline fit_feature_pipeline(std::span<const RunToFailureSeries> training,
                                     const FeaturePipelineOptions& options) {
  FeaturePipeline p;
  p.mask = drop_constant_channels(training, options.constant_tolerance);

  std::vector<Matrix> normal_raw;
  std::vector<const RunToFailureSeries*> owners;
  for (const auto& s : training) {
    if (s.change_point == 0) continue;
    normal_raw.push_back(apply_mask(s.sensors.topRows(static_cast<Eigen::Index>(s.change_point)), p.mask));
    owners.push_back(&s);
  }
  if (normal_raw.empty()) throw DataError("no training unit has a normal stage");

  if (options.per_condition) {
    std::map<std::string, std::vector<Matrix>> grouped;
    for (std::size_t u = 0; u < normal_raw.size(); ++u) {
      for (auto& [key, rows] : rows_by_condition(*owners[u], owners[u]->change_point)) {
        Matrix m(static_cast<Eigen::Index>(rows.size()), normal_raw[u].cols());
        for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = normal_raw[u].row(rows[i]);
        grouped[key].push_back(std::move(m));
      }
    }
    for (auto& [key, segs] : grouped) {
      p.condition_keys.push_back(key);
      p.stats.push_back(fit_normalizer(segs));
    }
  } else {
    p.stats.push_back(fit_normalizer(normal_raw));
  }

  std::vector<Matrix> normal;
  normal.reserve(owners.size());
  for (const auto* s : owners) {
    normal.push_back(p.normalize(*s).topRows(static_cast<Eigen::Index>(s->change_point)));
  }
  p.sfa = fit_sfa(normal, options.ridge);
  const std::vector<double> spectrum(p.sfa.slowness.data(), p.sfa.slowness.data() + p.sfa.slowness.size());
  p.sfa.num_slow = options.num_slow_features ? options.num_slow_features : select_num_slow_features(spectrum);
  if (p.sfa.num_slow > spectrum.size()) throw DataError("number of slow features exceeds channel count");

  // Autocorrelation of the first slow feature over the degradation stages.
  std::vector<std::vector<double>> degradation;
  std::size_t total = 0;
  for (const auto& s : training) {
    if (s.change_point >= s.length()) continue;
    const Matrix x = p.normalize(s).bottomRows(static_cast<Eigen::Index>(s.length() - s.change_point));
    const Vector first = x * p.sfa.weights.col(0);
    degradation.emplace_back(first.data(), first.data() + first.size());
    total += degradation.back().size();
  }
  if (total > 2) {
    const std::size_t max_lag = std::min(options.max_lag, total - 1);
    p.acf = pooled_acf(degradation, max_lag);
    const auto sel = select_window_length(p.acf, total);
    p.window_length = sel.length;
    p.window_within_band = sel.within_band;
  }
  if (options.window_length) {
    p.window_length = options.window_length;
    p.window_within_band = true;
  }
  if (p.window_length == 0) throw DataError("window length could not be determined; no degradation data");
  return p;
}

// ---- serialization ---------------------------------------------------------------

namespace {

Tensor matrix_tensor(const Matrix& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  }
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(v));
}

Matrix tensor_matrix(const Tensor& t) {
  if (t.rank() != 2) throw DataError("expected a rank-2 array, got " + shape_string(t.shape()));
  Matrix m(static_cast<Eigen::Index>(t.extent(0)), static_cast<Eigen::Index>(t.extent(1)));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t[static_cast<std::size_t>(r * m.cols() + c)];
  }
  return m;
}

Tensor vector_tensor(std::span<const double> v) { return Tensor({v.size()}, std::vector<double>(v.begin(), v.end())); }

const Tensor& require(const ParameterSet& arrays, const std::string& name) {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw DataError("feature model: missing array '" + name + "'");
  return it->second;
}

}  // namespace

nlohmann::json to_json(const FeaturePipeline& p) {
  ParameterSet arrays;
  std::vector<double> mask(p.mask.begin(), p.mask.end());
  arrays["channel_mask"] = vector_tensor(mask);
  Matrix means(static_cast<Eigen::Index>(p.stats.size()), p.stats.front().mean.size());
  Matrix stds(means.rows(), means.cols());
  for (std::size_t i = 0; i < p.stats.size(); ++i) {
    means.row(static_cast<Eigen::Index>(i)) = p.stats[i].mean.transpose();
    stds.row(static_cast<Eigen::Index>(i)) = p.stats[i].stddev.transpose();
  }
  arrays["normalizer.mean"] = matrix_tensor(means);
  arrays["normalizer.stddev"] = matrix_tensor(stds);
  arrays["sfa.weights"] = matrix_tensor(p.sfa.weights);
  arrays["sfa.slowness"] = vector_tensor(std::span<const double>(p.sfa.slowness.data(), p.sfa.slowness.size()));
  arrays["sfa.num_slow"] = Tensor::scalar(static_cast<double>(p.sfa.num_slow));
  arrays["sfa.ridge"] = Tensor::scalar(p.sfa.ridge);
  arrays["window.length"] = Tensor::scalar(static_cast<double>(p.window_length));
  arrays["window.within_band"] = Tensor::scalar(p.window_within_band ? 1.0 : 0.0);
  if (!p.acf.empty()) arrays["window.acf"] = vector_tensor(p.acf);
  nlohmann::json doc = to_json(arrays);
  if (!p.condition_keys.empty()) doc["normalizer.conditions"] = p.condition_keys;
  return doc;
}

FeaturePipeline feature_pipeline_from_json(const nlohmann::json& doc) {
  nlohmann::json arrays_doc = doc;
  FeaturePipeline p;
  if (doc.contains("normalizer.conditions")) {
    p.condition_keys = doc.at("normalizer.conditions").get<std::vector<std::string>>();
    arrays_doc.erase("normalizer.conditions");
  }
  const ParameterSet arrays = parameters_from_json(arrays_doc);
  for (double v : require(arrays, "channel_mask").values()) p.mask.push_back(v != 0.0);
  const Matrix means = tensor_matrix(require(arrays, "normalizer.mean"));
  const Matrix stds = tensor_matrix(require(arrays, "normalizer.stddev"));
  for (Eigen::Index i = 0; i < means.rows(); ++i) {
    p.stats.push_back({means.row(i).transpose(), stds.row(i).transpose()});
  }
  p.sfa.weights = tensor_matrix(require(arrays, "sfa.weights"));
  const Tensor& slowness = require(arrays, "sfa.slowness");
  p.sfa.slowness = Eigen::Map<const Vector>(slowness.data(), static_cast<Eigen::Index>(slowness.size()));
  p.sfa.num_slow = static_cast<std::size_t>(require(arrays, "sfa.num_slow").item());
  p.sfa.ridge = require(arrays, "sfa.ridge").item();
  p.window_length = static_cast<std::size_t>(require(arrays, "window.length").item());
  p.window_within_band = require(arrays, "window.within_band").item() != 0.0;
  if (auto it = arrays.find("window.acf"); it != arrays.end()) {
    p.acf.assign(it->second.values().begin(), it->second.values().end());
  }
  if (!p.condition_keys.empty() && p.condition_keys.size() != p.stats.size()) {
    throw DataError("feature model: condition keys do not match normalizer rows");
  }
  return p;
}

}  // namespace sdtc
