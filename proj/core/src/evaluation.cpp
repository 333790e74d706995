#include "sdtc/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "sdtc/checkpoint.hpp"
#include "sdtc/error.hpp"

namespace sdtc {

namespace {

void check_pair(std::span<const double> p, std::span<const double> t, const char* what) {
  if (p.empty()) throw DataError(std::string(what) + ": empty input");
  if (p.size() != t.size()) throw ShapeError(std::string(what) + ": prediction and truth counts differ");
}

}  // namespace

double rmse(std::span<const double> predictions, std::span<const double> truths) {
  check_pair(predictions, truths, "rmse");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - truths[i];
    sum += d * d;
  }
  return std::sqrt(sum / static_cast<double>(predictions.size()));
}

double scoring_function(std::span<const double> predictions, std::span<const double> truths) {
  check_pair(predictions, truths, "scoring_function");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - truths[i];
    sum += d < 0.0 ? std::expm1(-d / 13.0) : std::expm1(d / 10.0);
  }
  return sum;
}

std::size_t ErrorHistogram::total() const {
  std::size_t n = underflow + overflow;
  for (auto c : counts) n += c;
  return n;
}

ErrorHistogram error_distribution(std::span<const double> errors, std::span<const double> edges) {
  if (edges.size() < 2) throw ConfigError({"evaluation.error_bands needs at least two edges"});
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw ConfigError({"evaluation.error_bands must be strictly increasing"});
  }
  ErrorHistogram h;
  h.edges.assign(edges.begin(), edges.end());
  h.counts.assign(edges.size() - 1, 0);
  for (double e : errors) {
    if (e < edges.front()) {
      ++h.underflow;
    } else if (e >= edges.back()) {
      ++h.overflow;
    } else {
      const auto it = std::upper_bound(edges.begin(), edges.end(), e);
      ++h.counts[static_cast<std::size_t>(it - edges.begin()) - 1];
    }
  }
  return h;
}

std::vector<double> default_error_bands() { return {-40, -30, -20, -10, 0, 10, 20, 30, 40}; }

void summarize(EvaluationReport& r, std::span<const double> band_edges) {
  std::vector<double> pred, truth, err;
  for (const auto& row : r.rows) {
    pred.push_back(row.pred_rul);
    truth.push_back(row.true_rul);
    err.push_back(row.error);
  }
  r.rmse = rmse(pred, truth);
  r.score = scoring_function(pred, truth);
  r.histogram = error_distribution(err, band_edges);
}

nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& u : r.rows) {
    rows.push_back({{"unit_id", u.unit_id}, {"index", u.index}, {"true_rul", u.true_rul}, {"pred_rul", u.pred_rul},
                    {"error", u.error}});
  }
  return {{"schema_version", r.schema_version},
          {"variant", r.variant},
          {"dataset", r.dataset},
          {"seed", r.seed},
          {"clipped", r.clipped},
          {"rul_max", r.rul_max},
          {"rmse", r.rmse},
          {"score", r.score},
          {"histogram",
           {{"edges", r.histogram.edges},
            {"counts", r.histogram.counts},
            {"underflow", r.histogram.underflow},
            {"overflow", r.histogram.overflow}}},
          {"units", rows}};
}

EvaluationReport evaluation_report_from_json(const nlohmann::json& j) {
  EvaluationReport r;
  try {
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion) {
      throw DataError(fmt::format("evaluation report schema {} is not supported", r.schema_version));
    }
    r.variant = j.at("variant").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.clipped = j.at("clipped").get<bool>();
    r.rul_max = j.at("rul_max").get<double>();
    r.rmse = j.at("rmse").get<double>();
    r.score = j.at("score").get<double>();
    const auto& h = j.at("histogram");
    r.histogram.edges = h.at("edges").get<std::vector<double>>();
    r.histogram.counts = h.at("counts").get<std::vector<std::size_t>>();
    r.histogram.underflow = h.at("underflow").get<std::size_t>();
    r.histogram.overflow = h.at("overflow").get<std::size_t>();
    for (const auto& u : j.at("units")) {
      r.rows.push_back({u.at("unit_id").get<int>(), u.at("index").get<std::size_t>(), u.at("true_rul").get<double>(),
                        u.at("pred_rul").get<double>(), u.at("error").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed evaluation report: ") + e.what());
  }
  return r;
}

std::string report_csv(const EvaluationReport& r) {
  std::string out = "unit_id,true_rul,pred_rul,error\n";
  for (const auto& u : r.rows) out += fmt::format("{},{},{},{}\n", u.unit_id, u.true_rul, u.pred_rul, u.error);
  return out;
}

void emit_report(const EvaluationReport& r, const std::filesystem::path& stem) {
  write_text_file(stem.string() + ".json", to_json(r).dump(2) + "\n");
  write_text_file(stem.string() + ".csv", report_csv(r));
}

EvaluationReport parse_report(const std::filesystem::path& json_path) {
  return evaluation_report_from_json(read_json_file(json_path));
}

// ---- model application ---------------------------------------------------------------

Tensor sequence_input(const Matrix& hybrid, std::span<const std::size_t> end_points, std::size_t window,
                      std::size_t sequence_length) {
  if (hybrid.rows() == 0) throw DataError("sequence_input: empty series");
  const auto channels = static_cast<std::size_t>(hybrid.cols());
  Tensor out({end_points.size(), sequence_length, window, channels});
  double* dst = out.data();
  const auto rows = static_cast<long>(hybrid.rows());
  for (std::size_t end : end_points) {
    if (end < 1 || end > static_cast<std::size_t>(rows)) throw ShapeError("sequence_input: end point outside series");
    for (std::size_t s = 0; s < sequence_length; ++s) {
      const long frame_end = static_cast<long>(end) - static_cast<long>(sequence_length - 1 - s);  // 1-based
      for (std::size_t w = 0; w < window; ++w) {
        const long row = std::max(0L, frame_end - static_cast<long>(window) + static_cast<long>(w));
        for (std::size_t c = 0; c < channels; ++c) *dst++ = hybrid(row, static_cast<Eigen::Index>(c));
      }
    }
  }
  return out;
}

std::vector<UnitPrediction> score_series(const ModelConfig& config, const ParameterSet& params,
                                         const FeaturePipeline& pipeline, std::span<const RunToFailureSeries> series,
                                         const ScoringOptions& options) {
  if (options.batch_size == 0) throw ConfigError({"batch size must be positive"});
  std::vector<UnitPrediction> rows;
  for (const auto& s : series) {
    const Matrix hybrid = pipeline.hybrid(s, options.with_slow);
    if (static_cast<std::size_t>(hybrid.cols()) != config.channels) {
      throw ShapeError(fmt::format("unit {}: {} frame channels, model expects {}", s.unit_id, hybrid.cols(), config.channels));
    }
    const auto labels = series_labels(s, options.rul_max);
    std::vector<std::size_t> points;
    if (options.all_points) {
      const std::size_t first = std::min(s.length(), config.window_length + config.sequence_length - 1);
      for (std::size_t k = first; k <= s.length(); ++k) points.push_back(k);
    } else if (!s.evaluation_points.empty()) {
      points = s.evaluation_points;
    } else {
      points.push_back(s.length());
    }
    for (std::size_t begin = 0; begin < points.size(); begin += options.batch_size) {
      const std::size_t n = std::min(options.batch_size, points.size() - begin);
      const std::span<const std::size_t> chunk(points.data() + begin, n);
      const auto pred = predict(config, params, sequence_input(hybrid, chunk, config.window_length, config.sequence_length));
      for (std::size_t i = 0; i < n; ++i) {
        UnitPrediction u;
        u.unit_id = s.unit_id;
        u.index = chunk[i];
        u.true_rul = labels[chunk[i] - 1];
        u.pred_rul = options.clip ? std::clamp(pred[i], 0.0, options.rul_max) : pred[i];
        u.error = u.pred_rul - u.true_rul;
        rows.push_back(u);
      }
    }
  }
  return rows;
}

std::vector<UnitPrediction> last_point_predictions(const ModelConfig& config, const ParameterSet& params,
                                                   const FeaturePipeline& pipeline,
                                                   std::span<const RunToFailureSeries> series,
                                                   const ScoringOptions& options) {
  std::vector<RunToFailureSeries> last;
  last.reserve(series.size());
  for (const auto& s : series) {
    RunToFailureSeries copy = s;
    copy.evaluation_points.clear();
    last.push_back(std::move(copy));
  }
  ScoringOptions o = options;
  o.all_points = false;
  return score_series(config, params, pipeline, last, o);
}

}  // namespace sdtc
