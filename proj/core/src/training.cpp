#include "sdtc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "sdtc/error.hpp"

namespace sdtc {

std::uint64_t sub_seed(std::uint64_t seed, std::string_view stage) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (char c : stage) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void TrainConfig::validate() const {
  std::vector<std::string> p;
  if (epochs < 1) p.push_back("training.epochs must be at least 1");
  if (batch_size < 1) p.push_back("training.batch_size must be at least 1");
  if (patience < 1) p.push_back("training.patience must be at least 1");
  if (!(min_delta >= 0.0)) p.push_back("training.min_delta must be non-negative");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    p.push_back("training.validation_fraction must be in (0, 1)");
  }
  if (!(adam.learning_rate >= 0.0)) p.push_back("training.learning_rate must be non-negative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) p.push_back("training.beta1 must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) p.push_back("training.beta2 must be in [0, 1)");
  if (!(adam.epsilon > 0.0)) p.push_back("training.epsilon must be positive");
  if (sample_stride < 1) p.push_back("training.sample_stride must be at least 1");
  if (!p.empty()) throw ConfigError(std::move(p));
}

nlohmann::json to_json(const TrainReport& r) {
  return {{"train_loss", r.train_loss},
          {"validation_loss", r.validation_loss},
          {"best_epoch", r.best_epoch},
          {"best_validation_loss", r.best_epoch ? r.validation_loss[r.best_epoch - 1] : 0.0},
          {"epochs_run", r.train_loss.size()},
          {"stopped_early", r.stopped_early},
          {"parameter_count", r.parameter_count}};
}

std::string train_report_csv(const TrainReport& r) {
  std::string out = "epoch,train_loss,validation_loss\n";
  for (std::size_t e = 0; e < r.train_loss.size(); ++e) {
    out += fmt::format("{},{},{}\n", e + 1, r.train_loss[e], r.validation_loss[e]);
  }
  return out;
}

Tensor gather_sequences(const FrameBatch& frames, std::span<const std::size_t> ends, std::size_t sequence_length) {
  Tensor out({ends.size(), sequence_length, frames.window(), frames.channels()});
  double* dst = out.data();
  for (std::size_t end : ends) {
    if (end + 1 < sequence_length || end >= frames.size()) throw ShapeError("gather_sequences: sequence out of range");
    for (std::size_t s = 0; s < sequence_length; ++s) {
      const auto f = frames.frame(end + 1 - sequence_length + s);
      dst = std::copy(f.begin(), f.end(), dst);
    }
  }
  return out;
}

std::vector<double> gather_targets(const FrameBatch& frames, std::span<const std::size_t> ends) {
  std::vector<double> y;
  y.reserve(ends.size());
  for (std::size_t end : ends) y.push_back(frames.info(end).label);
  return y;
}

namespace {

double mean_squared_error(std::span<const double> pred, std::span<const double> truth) {
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return sum / static_cast<double>(pred.size());
}

void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

std::pair<std::vector<double>, std::vector<double>> predict_frames(const ModelConfig& model, const ParameterSet& params,
                                                                   const FrameBatch& frames, std::size_t batch_size) {
  const auto ends = frames.sequence_ends(model.sequence_length);
  std::vector<double> pred;
  pred.reserve(ends.size());
  for (std::size_t begin = 0; begin < ends.size(); begin += batch_size) {
    const std::span<const std::size_t> chunk(ends.data() + begin, std::min(batch_size, ends.size() - begin));
    const auto p = predict(model, params, gather_sequences(frames, chunk, model.sequence_length));
    pred.insert(pred.end(), p.begin(), p.end());
  }
  return {std::move(pred), gather_targets(frames, ends)};
}

TrainResult train(const ModelConfig& model_in, const FrameBatch& training, const FrameBatch& validation,
                  const TrainConfig& config) {
  config.validate();
  ModelConfig model = model_in;
  if (config.routing_iterations) model.routing_iterations = config.routing_iterations;
  model.validate();
  if (training.channels() != model.channels || training.window() != model.window_length) {
    throw ShapeError(fmt::format("train: frames are {}x{}, model expects {}x{}", training.window(), training.channels(),
                                 model.window_length, model.channels));
  }
  std::vector<std::size_t> ends;
  {
    const auto all = training.sequence_ends(model.sequence_length);
    for (std::size_t i = 0; i < all.size(); i += config.sample_stride) ends.push_back(all[i]);
  }
  if (ends.empty()) throw DataError("train: no complete training sequence");
  if (validation.sequence_ends(model.sequence_length).empty()) throw DataError("train: empty validation split");

  const auto started = std::chrono::steady_clock::now();
  std::mt19937_64 init_rng(sub_seed(config.seed, "init"));
  std::mt19937_64 order_rng(sub_seed(config.seed, "order"));
  std::mt19937_64 dropout_rng(sub_seed(config.seed, "dropout"));

  TrainResult result;
  ParameterSet params = init_parameters(model, init_rng);
  result.params = params;
  result.report.parameter_count = parameter_count(params);
  AdamState adam(config.adam);

  double best = std::numeric_limits<double>::infinity();
  double reference = best;  // last loss that counted as an improvement for patience
  std::size_t stale = 0;
  std::vector<std::size_t> order = ends;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle(order, order_rng);
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::span<const std::size_t> batch(order.data() + begin, std::min(config.batch_size, order.size() - begin));
      const Tensor inputs = gather_sequences(training, batch, model.sequence_length);
      const auto targets = gather_targets(training, batch);
      Tape tape;
      BoundParameters bound(tape, params);
      ForwardOptions fwd;
      fwd.mode = Mode::training;
      fwd.rng = &dropout_rng;
      Var loss;
      try {
        Var y = model_forward(tape, model, bound, inputs, fwd);
        Var t = tape.constant(Tensor({batch.size(), 1}, targets));
        Var d = ad::sub(y, t);
        loss = ad::mean(ad::mul(d, d));
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw NumericError(fmt::format("non-finite value in epoch {} batch {}: {}", epoch,
                                       begin / config.batch_size + 1, e.what()));
      }
      loss_sum += loss.value().item() * static_cast<double>(batch.size());
      adam_step(params, bound.gradients(), adam);
    }
    const double train_loss = loss_sum / static_cast<double>(order.size());
    const auto [pred, truth] = predict_frames(model, params, validation);
    const double val_loss = mean_squared_error(pred, truth);
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss)) {
      throw NumericError(fmt::format("non-finite loss in epoch {} (train {}, validation {})", epoch, train_loss, val_loss));
    }
    result.report.train_loss.push_back(train_loss);
    result.report.validation_loss.push_back(val_loss);
    spdlog::debug("epoch {}: train {:.6g} validation {:.6g}", epoch, train_loss, val_loss);

    if (val_loss < best) {
      best = val_loss;
      result.params = params;
      result.report.best_epoch = epoch;
    }
    if (val_loss < reference - config.min_delta) {
      reference = val_loss;
      stale = 0;
    } else if (++stale >= config.patience) {
      result.report.stopped_early = epoch < config.epochs;
      spdlog::info("early stop after epoch {} (best epoch {})", epoch, result.report.best_epoch);
      break;
    }
  }
  result.report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

TrainResult train(const ModelConfig& model, const FrameBatch& frames, const TrainConfig& config) {
  config.validate();
  std::vector<int> units;
  for (const auto& info : frames.infos()) {
    if (units.empty() || units.back() != info.unit_id) {
      if (std::find(units.begin(), units.end(), info.unit_id) == units.end()) units.push_back(info.unit_id);
    }
  }
  if (units.size() < 2) throw DataError("train: at least two units are needed for a validation split");
  std::vector<RunToFailureSeries> stubs(units.size());
  for (std::size_t i = 0; i < units.size(); ++i) stubs[i].unit_id = units[i];
  const auto [tr, va] = split_units(stubs, config.validation_fraction, sub_seed(config.seed, "split"));
  std::vector<int> tr_ids, va_ids;
  for (const auto& s : tr) tr_ids.push_back(s.unit_id);
  for (const auto& s : va) va_ids.push_back(s.unit_id);
  return train(model, frames.subset(tr_ids), frames.subset(va_ids), config);
}

ModelConfig derive_hyperparams(std::size_t num_slow, std::size_t num_sensors, std::size_t window_length,
                               const ModelConfig& base) {
  if (num_slow == 0 || num_sensors == 0) throw ConfigError({"derive_hyperparams: P and J must be positive"});
  ModelConfig c = base;
  c.window_length = window_length;
  c.channels = num_sensors + num_slow;
  c.num_advanced = num_slow;
  c.advanced_dim = num_sensors + num_slow;
  c.capsule_dim = std::max<std::size_t>(1, (num_slow + num_sensors) / 2);
  c.capsule_channels = 0;
  return c;
}

FrameBatch build_frames(const FeaturePipeline& pipeline, std::span<const RunToFailureSeries> series, bool with_slow,
                        double rul_max) {
  FrameBatch all;
  for (const auto& s : series) {
    const Matrix hybrid = pipeline.hybrid(s, with_slow);
    const auto labels = series_labels(s, rul_max);
    all.append(fuse_and_slice(hybrid, Matrix(hybrid.rows(), 0), labels, pipeline.window_length, 1, s.unit_id));
  }
  return all;
}

// ---- grid ------------------------------------------------------------------------------------

namespace {

GridCell run_cell(const ModelConfig& base, std::size_t filters, std::size_t units, const FrameBatch& training,
                  const FrameBatch& validation, const TrainConfig& config, double rul_max) {
  ModelConfig m = base;
  m.filters = filters;
  m.lstm_units = units;
  const TrainResult r = train(m, training, validation, config);
  auto [pred, truth] = predict_frames(m, r.params, validation);
  for (double& p : pred) p = std::clamp(p, 0.0, rul_max);
  return {filters, units, rmse(pred, truth), scoring_function(pred, truth), r.report.best_epoch};
}

bool better(const GridCell& a, const GridCell& b) {
  return a.rmse < b.rmse || (a.rmse == b.rmse && a.score < b.score);
}

}  // namespace

GridResult sensitivity_grid(const ModelConfig& base, const FrameBatch& training, const FrameBatch& validation,
                            const TrainConfig& config, const GridOptions& options) {
  if (options.filters.empty() || options.lstm_units.empty()) throw ConfigError({"tune: empty candidate grid"});
  const std::size_t jobs = std::max<std::size_t>(1, options.jobs);
  GridResult out;
  bool have_best = false;
  std::optional<GridCell> previous_row_best;
  for (std::size_t filters : options.filters) {
    ModelConfig probe = base;
    probe.filters = filters;
    try {
      probe.validate();
    } catch (const ConfigError& e) {
      spdlog::warn("tune: skipping {} filters: {}", filters, e.problems().front());
      continue;
    }
    std::optional<GridCell> row_best;
    std::optional<GridCell> previous_cell;
    bool row_done = false;
    for (std::size_t begin = 0; begin < options.lstm_units.size() && !row_done; begin += jobs) {
      const std::size_t end = std::min(options.lstm_units.size(), begin + jobs);
      std::vector<GridCell> cells;
      if (jobs == 1) {
        cells.push_back(run_cell(base, filters, options.lstm_units[begin], training, validation, config, options.rul_max));
      } else {
        std::vector<std::future<GridCell>> pending;
        for (std::size_t i = begin; i < end; ++i) {
          pending.push_back(std::async(std::launch::async, run_cell, std::cref(base), filters, options.lstm_units[i],
                                       std::cref(training), std::cref(validation), std::cref(config), options.rul_max));
        }
        for (auto& f : pending) cells.push_back(f.get());
      }
      for (const auto& cell : cells) {
        spdlog::info("tune: filters {} units {} rmse {:.4f} sf {:.2f}", cell.filters, cell.lstm_units, cell.rmse, cell.score);
        out.surface.push_back(cell);
        if (!row_best || better(cell, *row_best)) row_best = cell;
        if (!have_best || better(cell, out.best)) {
          out.best = cell;
          have_best = true;
        }
        const bool improved = !previous_cell || better(cell, *previous_cell);
        previous_cell = cell;
        if (options.stop_without_improvement && !improved) {
          row_done = true;
          break;
        }
      }
    }
    if (options.stop_without_improvement && previous_row_best && row_best && !better(*row_best, *previous_row_best)) {
      break;
    }
    if (row_best) previous_row_best = row_best;
  }
  if (!have_best) throw ConfigError({"tune: no valid grid cell"});
  return out;
}

nlohmann::json to_json(const GridResult& g) {
  auto cell = [](const GridCell& c) {
    return nlohmann::json{{"filters", c.filters},
                          {"lstm_units", c.lstm_units},
                          {"rmse", c.rmse},
                          {"score", c.score},
                          {"best_epoch", c.best_epoch}};
  };
  nlohmann::json surface = nlohmann::json::array();
  for (const auto& c : g.surface) surface.push_back(cell(c));
  return {{"best", cell(g.best)}, {"surface", surface}};
}

std::string grid_surface_csv(const GridResult& g) {
  std::string out = "filters,lstm_units,rmse,score,best_epoch\n";
  for (const auto& c : g.surface) out += fmt::format("{},{},{},{},{}\n", c.filters, c.lstm_units, c.rmse, c.score, c.best_epoch);
  return out;
}

// ---- ablation ------------------------------------------------------------------------------

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full:
      return "full";
    case Variant::no_sfa:
      return "no-sfa";
    case Variant::no_lstm:
      return "no-lstm";
    case Variant::plain_capsnet:
      return "plain-capsnet";
  }
  return "full";
}

Variant variant_from_string(const std::string& name) {
  for (Variant v : all_variants()) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError({"unknown variant '" + name + "' (expected full, no-sfa, no-lstm, plain-capsnet)"});
}

std::vector<Variant> all_variants() { return {Variant::full, Variant::no_sfa, Variant::no_lstm, Variant::plain_capsnet}; }

bool variant_uses_slow(Variant v) { return v == Variant::full || v == Variant::no_lstm; }

ModelConfig variant_config(const ModelConfig& full, Variant v, std::size_t num_slow) {
  ModelConfig m = full;
  if (!variant_uses_slow(v)) {
    if (m.channels <= num_slow) throw ConfigError({"no-sfa variant would leave no sensor channels"});
    m.channels -= num_slow;
  }
  if (v == Variant::no_lstm || v == Variant::plain_capsnet) {
    m.use_lstm = false;
    m.sequence_length = 1;
  }
  return m;
}

AblationOutcome ablation_run(Variant variant, const AblationInput& in) {
  if (in.pipeline == nullptr) throw ConfigError({"ablation: no feature pipeline"});
  const bool with_slow = variant_uses_slow(variant);
  AblationOutcome out;
  out.model = variant_config(in.model, variant, in.pipeline->sfa.num_slow);

  const std::vector<RunToFailureSeries> units(in.train.begin(), in.train.end());
  const auto [tr, va] = split_units(units, in.training.validation_fraction, sub_seed(in.training.seed, "split"));
  const FrameBatch train_frames = build_frames(*in.pipeline, tr, with_slow, in.scoring.rul_max);
  const FrameBatch val_frames = build_frames(*in.pipeline, va, with_slow, in.scoring.rul_max);
  TrainResult r = train(out.model, train_frames, val_frames, in.training);
  out.params = std::move(r.params);
  out.training = std::move(r.report);

  ScoringOptions scoring = in.scoring;
  scoring.with_slow = with_slow;
  out.report.variant = to_string(variant);
  out.report.dataset = in.dataset;
  out.report.seed = in.training.seed;
  out.report.clipped = scoring.clip;
  out.report.rul_max = scoring.rul_max;
  out.report.rows = score_series(out.model, out.params, *in.pipeline, in.test, scoring);
  summarize(out.report, in.error_bands);
  return out;
}

}  // namespace sdtc
