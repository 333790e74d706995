#include "sdtc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <future>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "sdtc/checkpoint.hpp"
#include "sdtc/error.hpp"

namespace sdtc {

RunConfig::RunConfig() {
  model.filters = 64;
  model.output_scale = 0.0;  // RUL_max
}

// ---- JSON ----------------------------------------------------------------------------------------

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json doc = to_json(c.model);
  doc["input"].erase("channels");
  doc["input"]["epoch"] = c.training.epochs;
  doc["input"]["window_length"] = c.features.window_length;
  doc["dataset"] = {{"name", c.dataset_name}, {"format", c.dataset_format}, {"rul_max", c.rul_max}};
  doc["features"] = {{"num_slow_features", c.features.num_slow_features},
                     {"ridge", c.features.ridge ? nlohmann::json(*c.features.ridge) : nlohmann::json()},
                     {"max_lag", c.features.max_lag},
                     {"constant_tolerance", c.features.constant_tolerance},
                     {"per_condition_normalization", c.features.per_condition}};
  doc["training"] = {{"batch_size", c.training.batch_size},
                     {"learning_rate", c.training.adam.learning_rate},
                     {"beta1", c.training.adam.beta1},
                     {"beta2", c.training.adam.beta2},
                     {"epsilon", c.training.adam.epsilon},
                     {"patience", c.training.patience},
                     {"min_delta", c.training.min_delta},
                     {"validation_fraction", c.training.validation_fraction},
                     {"sample_stride", c.training.sample_stride}};
  doc["tune"] = {{"filters", c.tune.filters},
                 {"lstm_units", c.tune.lstm_units},
                 {"stop_without_improvement", c.tune.stop_without_improvement}};
  doc["ablation"] = {{"repeats", c.ablation_repeats}};
  doc["synthetic"] = to_json(c.synthetic);
  doc["evaluation"] = {{"clip", c.clip}, {"error_bands", c.error_bands}, {"all_points", c.score_all_points}};
  return doc;
}

namespace {

const char* type_name(const nlohmann::json& j) {
  if (j.is_number_unsigned()) return "non-negative integer";
  if (j.is_number()) return "number";
  return j.type_name();
}

bool compatible(const nlohmann::json& reference, const nlohmann::json& value) {
  if (reference.is_null()) return value.is_null() || value.is_number();
  if (reference.is_number_unsigned()) return value.is_number_unsigned();
  if (reference.is_number()) return value.is_number();
  if (reference.is_boolean()) return value.is_boolean();
  if (reference.is_string()) return value.is_string();
  if (reference.is_array()) return value.is_array();
  if (reference.is_object()) return value.is_object();
  return false;
}

void check_keys(const nlohmann::json& reference, const nlohmann::json& doc, const std::string& prefix,
                std::vector<std::string>& problems) {
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!reference.contains(it.key())) {
      problems.push_back("unknown key '" + path + "'");
      continue;
    }
    const auto& ref = reference.at(it.key());
    if (!compatible(ref, it.value())) {
      problems.push_back(fmt::format("'{}' must be a {} (got {})", path, type_name(ref), it.value().dump()));
      continue;
    }
    if (ref.is_object()) check_keys(ref, it.value(), path, problems);
  }
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& user) {
  const nlohmann::json defaults = to_json(RunConfig{});
  std::vector<std::string> problems;
  if (!user.is_object()) throw ConfigError({"configuration must be a JSON object"});
  check_keys(defaults, user, "", problems);
  if (!problems.empty()) throw ConfigError(std::move(problems));

  nlohmann::json doc = defaults;
  doc.merge_patch(user);
  RunConfig c;
  try {
    c.model = model_config_from_json(doc);
    const auto& d = doc.at("dataset");
    c.dataset_name = d.at("name").get<std::string>();
    c.dataset_format = d.at("format").get<std::string>();
    c.rul_max = d.at("rul_max").get<double>();
    const auto& f = doc.at("features");
    c.features.num_slow_features = f.at("num_slow_features").get<std::size_t>();
    if (f.contains("ridge") && !f.at("ridge").is_null()) c.features.ridge = f.at("ridge").get<double>();
    c.features.max_lag = f.at("max_lag").get<std::size_t>();
    c.features.constant_tolerance = f.at("constant_tolerance").get<double>();
    c.features.per_condition = f.at("per_condition_normalization").get<bool>();
    c.features.window_length = doc.at("input").at("window_length").get<std::size_t>();
    c.training.epochs = doc.at("input").at("epoch").get<std::size_t>();
    const auto& t = doc.at("training");
    c.training.batch_size = t.at("batch_size").get<std::size_t>();
    c.training.adam.learning_rate = t.at("learning_rate").get<double>();
    c.training.adam.beta1 = t.at("beta1").get<double>();
    c.training.adam.beta2 = t.at("beta2").get<double>();
    c.training.adam.epsilon = t.at("epsilon").get<double>();
    c.training.patience = t.at("patience").get<std::size_t>();
    c.training.min_delta = t.at("min_delta").get<double>();
    c.training.validation_fraction = t.at("validation_fraction").get<double>();
    c.training.sample_stride = t.at("sample_stride").get<std::size_t>();
    const auto& g = doc.at("tune");
    c.tune.filters = g.at("filters").get<std::vector<std::size_t>>();
    c.tune.lstm_units = g.at("lstm_units").get<std::vector<std::size_t>>();
    c.tune.stop_without_improvement = g.at("stop_without_improvement").get<bool>();
    c.ablation_repeats = doc.at("ablation").at("repeats").get<std::size_t>();
    c.synthetic = synthetic_spec_from_json(doc.at("synthetic"));
    const auto& e = doc.at("evaluation");
    c.clip = e.at("clip").get<bool>();
    c.error_bands = e.at("error_bands").get<std::vector<double>>();
    c.score_all_points = e.at("all_points").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError({std::string("configuration: ") + e.what()});
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  std::vector<std::string> p;
  auto absorb = [&](auto&& check) {
    try {
      check();
    } catch (const ConfigError& e) {
      p.insert(p.end(), e.problems().begin(), e.problems().end());
    }
  };
  if (dataset_format != "cmapss" && dataset_format != "milling") {
    p.push_back("dataset.format must be 'cmapss' or 'milling'");
  }
  if (dataset_name.empty()) p.push_back("dataset.name must not be empty");
  if (!(rul_max >= 0.0)) p.push_back("dataset.rul_max must be non-negative");
  if (dataset_format == "cmapss" && !(rul_max > 0.0)) p.push_back("dataset.rul_max must be positive for cmapss data");
  if (!(features.constant_tolerance >= 0.0)) p.push_back("features.constant_tolerance must be non-negative");
  if (features.ridge && !(*features.ridge >= 0.0)) p.push_back("features.ridge must be non-negative");
  if (features.max_lag < 1) p.push_back("features.max_lag must be at least 1");

  // Model fields that do not depend on the fitted features.
  const ModelConfig& m = model;
  if (m.filters == 0) p.push_back("convolution.filters must be positive");
  if (m.conv_kernel.rows == 0 || m.conv_kernel.cols == 0) p.push_back("convolution.kernel_size must be positive");
  if (m.conv_stride.rows == 0 || m.conv_stride.cols == 0) p.push_back("convolution.strides must be positive");
  if (m.capsule_stride.rows == 0 || m.capsule_stride.cols == 0) p.push_back("basic_capsule.strides must be positive");
  if (m.capsule_dim && m.capsule_channels == 0 && m.filters % m.capsule_dim != 0) {
    p.push_back(fmt::format("convolution.filters ({}) must be divisible by basic_capsule.dimensions ({})", m.filters,
                            m.capsule_dim));
  }
  if (m.routing_iterations < 1) p.push_back("advanced_capsule.routing_iterations must be at least 1");
  if (m.sequence_length < 1) p.push_back("lstm.sequence_length must be at least 1");
  if (m.use_lstm && m.lstm_units == 0) p.push_back("lstm.units must be positive");
  if (!m.use_lstm && m.sequence_length != 1) p.push_back("lstm.sequence_length must be 1 when the LSTM is disabled");
  for (std::size_t i = 0; i < m.fnn.size(); ++i) {
    if (m.fnn[i].neurons == 0) p.push_back(fmt::format("output.fnn[{}].neurons must be positive", i));
    if (!(m.fnn[i].dropout >= 0.0 && m.fnn[i].dropout < 1.0)) {
      p.push_back(fmt::format("output.fnn[{}].dropout must be in [0, 1)", i));
    }
  }
  if (m.fnn_activation != "relu" && m.fnn_activation != "tanh") p.push_back("output.activation must be 'relu' or 'tanh'");
  if (!(m.output_scale >= 0.0)) p.push_back("output.scale must be non-negative (0: dataset.rul_max)");

  absorb([&] { training.validate(); });
  absorb([&] { synthetic.validate(); });
  if (tune.filters.empty()) p.push_back("tune.filters must not be empty");
  if (tune.lstm_units.empty()) p.push_back("tune.lstm_units must not be empty");
  if (std::find(tune.filters.begin(), tune.filters.end(), 0) != tune.filters.end()) p.push_back("tune.filters entries must be positive");
  if (std::find(tune.lstm_units.begin(), tune.lstm_units.end(), 0) != tune.lstm_units.end()) {
    p.push_back("tune.lstm_units entries must be positive");
  }
  if (ablation_repeats < 1) p.push_back("ablation.repeats must be at least 1");
  absorb([&] { error_distribution({}, error_bands); });
  if (!p.empty()) throw ConfigError(std::move(p));
}

void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides) {
  std::vector<std::string> problems;
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) {
      problems.push_back("override '" + item + "' is not key=value");
      continue;
    }
    const std::string key = item.substr(0, eq);
    const std::string text = item.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    nlohmann::json* node = &doc;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) {
        problems.push_back("override key '" + key + "' has an empty component");
        break;
      }
      if (!node->is_object()) *node = nlohmann::json::object();
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

std::string config_hash(const nlohmann::json& doc) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : doc.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", h);
}

ResolvedConfig resolve_config(const RunSpec& spec) {
  nlohmann::json user = nlohmann::json::object();
  if (spec.config_path) {
    try {
      user = read_json_file(*spec.config_path);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError({spec.config_path->string() + ": " + e.what()});
    }
  }
  apply_overrides(user, spec.overrides);
  if (spec.epochs) user["input"]["epoch"] = *spec.epochs;
  if (spec.no_clip) user["evaluation"]["clip"] = false;
  ResolvedConfig r;
  r.config = run_config_from_json(user);
  r.document = to_json(r.config);
  return r;
}

// ---- data ------------------------------------------------------------------------------------

Dataset load_dataset(const RunConfig& c, const std::filesystem::path& data_dir) {
  if (c.dataset_format == "milling") {
    const auto path = data_dir / (c.dataset_name + ".csv");
    return split_milling_protocol(load_milling(path, c.dataset_name));
  }
  return load_cmapss_dir(data_dir, c.dataset_name, c.rul_max);
}

namespace {

double effective_rul_max(const RunConfig& c, const Dataset& d) { return c.rul_max > 0.0 ? c.rul_max : d.manifest.rul_max; }

}  // namespace

ModelConfig resolve_model(const RunConfig& c, const FeaturePipeline& pipeline, Variant variant) {
  const std::size_t sensors = pipeline.retained_channels();
  const std::size_t slow = pipeline.sfa.num_slow;
  ModelConfig m = derive_hyperparams(slow, sensors, pipeline.window_length, c.model);
  if (c.model.num_advanced) m.num_advanced = c.model.num_advanced;
  if (c.model.advanced_dim) m.advanced_dim = c.model.advanced_dim;
  if (c.model.capsule_dim) m.capsule_dim = c.model.capsule_dim;
  m.capsule_channels = c.model.capsule_channels;
  if (m.output_scale == 0.0) m.output_scale = c.rul_max > 0.0 ? c.rul_max : 1.0;
  m = variant_config(m, variant, slow);
  m.validate();
  return m;
}

// ---- commands -----------------------------------------------------------------------------------

namespace {

void write_manifest(const RunSpec& spec, const ResolvedConfig& rc, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json m = {{"command", spec.command},
                      {"seed", spec.seed},
                      {"config_hash", config_hash(rc.document)},
                      {"version", kVersion},
                      {"dataset", rc.config.dataset_name},
                      {"config", rc.document}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  write_text_file(spec.out_dir / ("manifest_" + spec.command + ".json"), m.dump(2) + "\n");
}

void require_file(const std::filesystem::path& path, const std::string& hint) {
  if (!std::filesystem::exists(path)) throw IoError("missing input '" + path.string() + "'; " + hint);
}

FeaturePipeline load_features(const RunSpec& spec) {
  const auto path = spec.out_dir / "features.json";
  require_file(path, "run fit-features first");
  return feature_pipeline_from_json(read_json_file(path));
}

TrainConfig train_config(const RunConfig& c, std::uint64_t seed) {
  TrainConfig t = c.training;
  t.seed = sub_seed(seed, "train");
  return t;
}

std::string join_row(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
  return out + "\n";
}

std::vector<std::string> retained_names(const DatasetManifest& manifest, const FeaturePipeline& p) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < p.mask.size(); ++i) {
    if (p.mask[i]) names.push_back(i < manifest.channel_names.size() ? manifest.channel_names[i] : fmt::format("c{}", i + 1));
  }
  return names;
}

}  // namespace

void cmd_synth(const RunSpec& spec) {
  const auto rc = resolve_config(spec);
  std::filesystem::create_directories(spec.out_dir);
  SyntheticSpec s = rc.config.synthetic;
  const auto syn = generate_synthetic(s, sub_seed(spec.seed, "synth"));
  write_cmapss(spec.out_dir, rc.config.dataset_name, syn.data);
  ParameterSet truth;
  Tensor mixing({static_cast<std::size_t>(syn.mixing.rows()), static_cast<std::size_t>(syn.mixing.cols())});
  for (Eigen::Index r = 0; r < syn.mixing.rows(); ++r) {
    for (Eigen::Index c = 0; c < syn.mixing.cols(); ++c) mixing[static_cast<std::size_t>(r * syn.mixing.cols() + c)] = syn.mixing(r, c);
  }
  truth["mixing"] = std::move(mixing);
  nlohmann::json doc = {{"spec", to_json(s)}, {"arrays", to_json(truth)}, {"manifest", to_json(syn.data.manifest)}};
  write_text_file(spec.out_dir / "synthetic_truth.json", doc.dump(1) + "\n");
  write_manifest(spec, rc);
  spdlog::info("synth: {} train / {} test units written to {}", syn.data.train.size(), syn.data.test.size(),
               spec.out_dir.string());
}

void cmd_fit_features(const RunSpec& spec) {
  const auto rc = resolve_config(spec);
  const RunConfig& c = rc.config;
  const Dataset data = load_dataset(c, spec.data_dir);
  std::filesystem::create_directories(spec.out_dir);
  const FeaturePipeline p = fit_feature_pipeline(data.train, c.features);
  write_text_file(spec.out_dir / "features.json", to_json(p).dump(1) + "\n");
  write_text_file(spec.out_dir / "dataset_manifest.json", to_json(data.manifest).dump(2) + "\n");

  std::string spectrum = "index,slowness,slow\n";
  for (Eigen::Index i = 0; i < p.sfa.slowness.size(); ++i) {
    spectrum += fmt::format("{},{},{}\n", i + 1, p.sfa.slowness[i], static_cast<std::size_t>(i) < p.sfa.num_slow ? 1 : 0);
  }
  write_text_file(spec.out_dir / "spectrum.csv", spectrum);

  std::string acf = "lag,rho,band\n";
  std::size_t degradation_samples = 0;
  for (const auto& s : data.train) degradation_samples += s.length() - s.change_point;
  const double band = degradation_samples ? 2.0 / std::sqrt(static_cast<double>(degradation_samples)) : 0.0;
  for (std::size_t k = 0; k < p.acf.size(); ++k) acf += fmt::format("{},{},{}\n", k, p.acf[k], band);
  write_text_file(spec.out_dir / "acf.csv", acf);

  const auto names = retained_names(data.manifest, p);
  std::vector<std::string> header{"unit_id", "index", "stage"};
  header.insert(header.end(), names.begin(), names.end());
  std::vector<std::string> res_header{"unit_id", "index", "stage"};
  for (std::size_t i = 1; i <= p.sfa.num_slow; ++i) header.push_back(fmt::format("slow{}", i));
  const std::size_t residual_count = static_cast<std::size_t>(p.sfa.weights.cols()) - p.sfa.num_slow;
  for (std::size_t i = 1; i <= residual_count; ++i) res_header.push_back(fmt::format("residual{}", i));
  std::string features = join_row(header);
  std::string residual = join_row(res_header);
  for (const auto& s : data.train) {
    const Matrix x = p.normalize(s);
    const Matrix slow = project_slow_features(x, p.sfa);
    const Matrix res = project_residual_features(x, p.sfa);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const char* stage = static_cast<std::size_t>(r) < s.change_point ? "normal" : "degradation";
      std::string line = fmt::format("{},{},{}", s.unit_id, r + 1, stage);
      for (Eigen::Index k = 0; k < x.cols(); ++k) line += fmt::format(",{}", x(r, k));
      for (Eigen::Index k = 0; k < slow.cols(); ++k) line += fmt::format(",{}", slow(r, k));
      features += line + "\n";
      std::string rline = fmt::format("{},{},{}", s.unit_id, r + 1, stage);
      for (Eigen::Index k = 0; k < res.cols(); ++k) rline += fmt::format(",{}", res(r, k));
      residual += rline + "\n";
    }
  }
  write_text_file(spec.out_dir / "features.csv", features);
  write_text_file(spec.out_dir / "residual.csv", residual);
  write_manifest(spec, rc,
                 {{"num_slow_features", p.sfa.num_slow},
                  {"window_length", p.window_length},
                  {"window_within_band", p.window_within_band},
                  {"retained_channels", names}});
  spdlog::info("fit-features: {} channels retained, P = {}, L = {}", names.size(), p.sfa.num_slow, p.window_length);
}

void cmd_train(const RunSpec& spec) {
  const auto rc = resolve_config(spec);
  const RunConfig& c = rc.config;
  const FeaturePipeline p = load_features(spec);
  const Dataset data = load_dataset(c, spec.data_dir);
  const double rul_max = effective_rul_max(c, data);
  const Variant variant = spec.variant.empty() ? Variant::full : variant_from_string(spec.variant);
  RunConfig adjusted = c;
  adjusted.rul_max = rul_max;
  const ModelConfig model = resolve_model(adjusted, p, variant);
  const TrainConfig tc = train_config(c, spec.seed);

  const auto [tr, va] = split_units(data.train, tc.validation_fraction, sub_seed(tc.seed, "split"));
  const bool with_slow = variant_uses_slow(variant);
  const FrameBatch train_frames = build_frames(p, tr, with_slow, rul_max);
  const FrameBatch val_frames = build_frames(p, va, with_slow, rul_max);
  spdlog::info("train: {} training frames, {} validation frames, {} basic capsules", train_frames.size(),
               val_frames.size(), model.num_basic_capsules());
  const TrainResult r = train(model, train_frames, val_frames, tc);

  save_checkpoint(r.params, spec.out_dir / "checkpoint.json");
  nlohmann::json mc = {{"variant", to_string(variant)}, {"rul_max", rul_max}, {"model", to_json(model)}};
  write_text_file(spec.out_dir / "model_config.json", mc.dump(2) + "\n");
  write_text_file(spec.out_dir / "train_report.json", to_json(r.report).dump(2) + "\n");
  write_text_file(spec.out_dir / "train_report.csv", train_report_csv(r.report));
  write_text_file(spec.out_dir / "timing.json",
                  nlohmann::json({{"train_seconds", r.report.seconds}, {"epochs_run", r.report.train_loss.size()}}).dump(2) +
                      "\n");
  write_manifest(spec, rc, {{"variant", to_string(variant)}});
  spdlog::info("train: best epoch {} validation MSE {:.4f}", r.report.best_epoch,
               r.report.validation_loss[r.report.best_epoch - 1]);
}

void cmd_evaluate(const RunSpec& spec) {
  const auto rc = resolve_config(spec);
  const RunConfig& c = rc.config;
  const FeaturePipeline p = load_features(spec);
  require_file(spec.out_dir / "checkpoint.json", "run train first");
  require_file(spec.out_dir / "model_config.json", "run train first");
  const ParameterSet params = load_checkpoint(spec.out_dir / "checkpoint.json");
  const auto mc = read_json_file(spec.out_dir / "model_config.json");
  const ModelConfig model = model_config_from_json(mc.at("model"));
  check_parameters(model, params);
  const Variant variant = variant_from_string(mc.at("variant").get<std::string>());
  const Dataset data = load_dataset(c, spec.data_dir);
  if (data.test.empty()) throw DataError("dataset has no test units");

  ScoringOptions scoring;
  scoring.with_slow = variant_uses_slow(variant);
  scoring.clip = c.clip;
  scoring.rul_max = mc.at("rul_max").get<double>();
  scoring.all_points = c.score_all_points;
  EvaluationReport report;
  report.variant = to_string(variant);
  report.dataset = c.dataset_name;
  report.seed = spec.seed;
  report.clipped = c.clip;
  report.rul_max = scoring.rul_max;
  report.rows = score_series(model, params, p, data.test, scoring);
  summarize(report, c.error_bands);
  emit_report(report, spec.out_dir / "eval_report");
  write_manifest(spec, rc, {{"variant", report.variant}});
  spdlog::info("evaluate: {} points, RMSE {:.4f}, SF {:.4f}", report.rows.size(), report.rmse, report.score);
}

void cmd_tune(const RunSpec& spec) {
  const auto rc = resolve_config(spec);
  const RunConfig& c = rc.config;
  const FeaturePipeline p = load_features(spec);
  const Dataset data = load_dataset(c, spec.data_dir);
  const double rul_max = effective_rul_max(c, data);
  RunConfig adjusted = c;
  adjusted.rul_max = rul_max;
  adjusted.model.capsule_channels = 0;  // channels follow M / D as M varies
  ModelConfig base = resolve_model(adjusted, p, Variant::full);
  const TrainConfig tc = train_config(c, spec.seed);
  const auto [tr, va] = split_units(data.train, tc.validation_fraction, sub_seed(tc.seed, "split"));
  const FrameBatch train_frames = build_frames(p, tr, true, rul_max);
  const FrameBatch val_frames = build_frames(p, va, true, rul_max);
  GridOptions options = c.tune;
  options.jobs = spec.jobs;
  options.rul_max = rul_max;
  const GridResult g = sensitivity_grid(base, train_frames, val_frames, tc, options);
  write_text_file(spec.out_dir / "grid_surface.json", to_json(g).dump(2) + "\n");
  write_text_file(spec.out_dir / "grid_surface.csv", grid_surface_csv(g));
  write_manifest(spec, rc);
  spdlog::info("tune: best filters {} LSTM units {} (RMSE {:.4f})", g.best.filters, g.best.lstm_units, g.best.rmse);
}

void cmd_ablate(const RunSpec& spec) {
  const auto rc = resolve_config(spec);
  const RunConfig& c = rc.config;
  const FeaturePipeline p = load_features(spec);
  const Dataset data = load_dataset(c, spec.data_dir);
  if (data.test.empty()) throw DataError("dataset has no test units");
  const double rul_max = effective_rul_max(c, data);
  RunConfig adjusted = c;
  adjusted.rul_max = rul_max;
  const ModelConfig full = resolve_model(adjusted, p, Variant::full);
  std::vector<Variant> variants = spec.variant.empty() || spec.variant == "all"
                                      ? all_variants()
                                      : std::vector<Variant>{variant_from_string(spec.variant)};

  struct Job {
    Variant variant;
    std::size_t repeat;
  };
  std::vector<Job> jobs;
  for (Variant v : variants) {
    for (std::size_t r = 0; r < c.ablation_repeats; ++r) jobs.push_back({v, r});
  }
  auto run = [&](const Job& job) {
    AblationInput in;
    in.train = data.train;
    in.test = data.test;
    in.pipeline = &p;
    in.model = full;
    in.training = train_config(c, job.repeat == 0 ? spec.seed : sub_seed(spec.seed, fmt::format("repeat-{}", job.repeat)));
    in.scoring.clip = c.clip;
    in.scoring.rul_max = rul_max;
    in.scoring.all_points = c.score_all_points;
    in.error_bands = c.error_bands;
    in.dataset = c.dataset_name;
    return ablation_run(job.variant, in);
  };
  std::vector<AblationOutcome> outcomes(jobs.size());
  const std::size_t width = std::max<std::size_t>(1, spec.jobs);
  for (std::size_t begin = 0; begin < jobs.size(); begin += width) {
    const std::size_t end = std::min(jobs.size(), begin + width);
    if (width == 1) {
      outcomes[begin] = run(jobs[begin]);
      continue;
    }
    std::vector<std::future<AblationOutcome>> pending;
    for (std::size_t i = begin; i < end; ++i) pending.push_back(std::async(std::launch::async, run, jobs[i]));
    for (std::size_t i = begin; i < end; ++i) outcomes[i] = pending[i - begin].get();
  }

  std::string table = "variant,runs,rmse_mean,rmse_std,score_mean,score_std,parameter_count\n";
  for (Variant v : variants) {
    std::vector<double> rm, sc;
    std::size_t params = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (jobs[i].variant != v) continue;
      const auto& o = outcomes[i];
      const std::string stem = c.ablation_repeats == 1 ? fmt::format("ablation_{}", to_string(v))
                                                       : fmt::format("ablation_{}_r{}", to_string(v), jobs[i].repeat + 1);
      emit_report(o.report, spec.out_dir / stem);
      rm.push_back(o.report.rmse);
      sc.push_back(o.report.score);
      params = o.training.parameter_count;
    }
    auto mean_std = [](const std::vector<double>& x) {
      double m = 0.0, s = 0.0;
      for (double v : x) m += v;
      m /= static_cast<double>(x.size());
      for (double v : x) s += (v - m) * (v - m);
      return std::pair{m, x.size() > 1 ? std::sqrt(s / static_cast<double>(x.size() - 1)) : 0.0};
    };
    const auto [rmean, rstd] = mean_std(rm);
    const auto [smean, sstd] = mean_std(sc);
    table += fmt::format("{},{},{},{},{},{},{}\n", to_string(v), rm.size(), rmean, rstd, smean, sstd, params);
  }
  write_text_file(spec.out_dir / "ablation_table.csv", table);
  write_manifest(spec, rc);
  spdlog::info("ablate: table written to {}", (spec.out_dir / "ablation_table.csv").string());
}

void run_command(const RunSpec& spec) {
  if (spec.command == "synth") return cmd_synth(spec);
  if (spec.command == "fit-features") return cmd_fit_features(spec);
  if (spec.command == "train") return cmd_train(spec);
  if (spec.command == "evaluate") return cmd_evaluate(spec);
  if (spec.command == "tune") return cmd_tune(spec);
  if (spec.command == "ablate") return cmd_ablate(spec);
  throw ConfigError({"unknown command '" + spec.command + "'"});
}

}  // namespace sdtc
