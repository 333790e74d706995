#include "sdtc/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "sdtc/error.hpp"

namespace sdtc {

nlohmann::json to_json(const DatasetManifest& m) {
  return {{"name", m.name},
          {"train_units", m.train_units},
          {"test_units", m.test_units},
          {"channel_names", m.channel_names},
          {"operating_conditions", m.operating_conditions},
          {"rul_max", m.rul_max},
          {"tags", m.tags}};
}

namespace {

std::size_t count_conditions(const std::vector<RunToFailureSeries>& series) {
  std::set<std::string> keys;
  for (const auto& s : series) {
    for (Eigen::Index r = 0; r < s.settings.rows(); ++r) keys.insert(condition_key(s.settings.row(r)));
  }
  return keys.size();
}

std::vector<std::string> distinct_tags(const std::vector<RunToFailureSeries>& a, const std::vector<RunToFailureSeries>& b) {
  std::set<std::string> tags;
  for (const auto* list : {&a, &b}) {
    for (const auto& s : *list) {
      if (!s.tag.empty()) tags.insert(s.tag);
    }
  }
  return {tags.begin(), tags.end()};
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return in;
}

struct CmapssRow {
  int unit = 0;
  int cycle = 0;
  std::vector<double> values;  // settings then sensors
};

std::vector<CmapssRow> parse_cmapss_rows(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::vector<CmapssRow> rows;
  std::string line;
  std::size_t line_no = 0;
  constexpr std::size_t kColumns = 2 + kCmapssSettings + kCmapssSensors;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    std::vector<double> v;
    std::string token;
    while (fields >> token) {
      char* end = nullptr;
      const double x = std::strtod(token.c_str(), &end);
      if (end == token.c_str() || *end != '\0' || !std::isfinite(x)) {
        throw DataError(fmt::format("{}:{}: malformed value '{}'", path.string(), line_no, token));
      }
      v.push_back(x);
    }
    if (v.size() != kColumns) {
      throw DataError(fmt::format("{}:{}: expected {} columns, found {}", path.string(), line_no, kColumns, v.size()));
    }
    if (v[0] != std::floor(v[0]) || v[1] != std::floor(v[1]) || v[0] < 1 || v[1] < 1) {
      throw DataError(fmt::format("{}:{}: unit id and cycle must be positive integers", path.string(), line_no));
    }
    rows.push_back({static_cast<int>(v[0]), static_cast<int>(v[1]), std::vector<double>(v.begin() + 2, v.end())});
  }
  return rows;
}

std::vector<RunToFailureSeries> group_cmapss(const std::vector<CmapssRow>& rows, const std::filesystem::path& path) {
  std::map<int, std::vector<const CmapssRow*>> by_unit;
  for (const auto& r : rows) by_unit[r.unit].push_back(&r);
  std::vector<RunToFailureSeries> out;
  for (auto& [unit, list] : by_unit) {
    std::stable_sort(list.begin(), list.end(), [](const CmapssRow* a, const CmapssRow* b) { return a->cycle < b->cycle; });
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i]->cycle != static_cast<int>(i + 1)) {
        throw DataError(fmt::format("{}: unit {} has non-contiguous cycles (expected {}, found {})", path.string(), unit,
                                    i + 1, list[i]->cycle));
      }
    }
    RunToFailureSeries s;
    s.unit_id = unit;
    const auto n = static_cast<Eigen::Index>(list.size());
    s.settings.resize(n, kCmapssSettings);
    s.sensors.resize(n, kCmapssSensors);
    for (Eigen::Index r = 0; r < n; ++r) {
      const auto& v = list[static_cast<std::size_t>(r)]->values;
      for (std::size_t c = 0; c < kCmapssSettings; ++c) s.settings(r, static_cast<Eigen::Index>(c)) = v[c];
      for (std::size_t c = 0; c < kCmapssSensors; ++c) {
        s.sensors(r, static_cast<Eigen::Index>(c)) = v[kCmapssSettings + c];
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> parse_rul_file(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::vector<double> rul;
  std::string token;
  while (in >> token) {
    char* end = nullptr;
    const double x = std::strtod(token.c_str(), &end);
    if (end == token.c_str() || *end != '\0' || !(x >= 0.0)) {
      throw DataError(fmt::format("{}: malformed RUL value '{}'", path.string(), token));
    }
    rul.push_back(x);
  }
  return rul;
}

std::size_t change_point_for(std::size_t length, double final_rul, double rul_max) {
  const double cp = static_cast<double>(length) + final_rul - rul_max;
  if (cp <= 0.0) return 0;
  return std::min(length, static_cast<std::size_t>(std::llround(cp)));
}

}  // namespace

Dataset load_cmapss(const std::filesystem::path& train, const std::filesystem::path& test,
                    const std::filesystem::path& rul, double rul_max, std::string name) {
  if (!(rul_max > 0.0)) throw ConfigError({"dataset.rul_max must be positive"});
  Dataset d;
  d.train = group_cmapss(parse_cmapss_rows(train), train);
  d.test = group_cmapss(parse_cmapss_rows(test), test);
  const auto truths = parse_rul_file(rul);
  if (truths.size() != d.test.size()) {
    throw DataError(fmt::format("{}: {} RUL values for {} test units", rul.string(), truths.size(), d.test.size()));
  }
  for (auto& s : d.train) s.change_point = change_point_for(s.length(), 0.0, rul_max);
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    auto& s = d.test[i];
    s.final_rul = truths[i];
    s.change_point = change_point_for(s.length(), s.final_rul, rul_max);
    s.labels = series_labels(s, rul_max);
  }
  d.manifest.name = std::move(name);
  d.manifest.train_units = d.train.size();
  d.manifest.test_units = d.test.size();
  for (std::size_t c = 1; c <= kCmapssSensors; ++c) d.manifest.channel_names.push_back("s" + std::to_string(c));
  d.manifest.operating_conditions = count_conditions(d.train);
  d.manifest.rul_max = rul_max;
  return d;
}

Dataset load_cmapss_dir(const std::filesystem::path& dir, const std::string& name, double rul_max) {
  return load_cmapss(dir / ("train_" + name + ".txt"), dir / ("test_" + name + ".txt"), dir / ("RUL_" + name + ".txt"),
                     rul_max, name);
}

namespace {

void write_cmapss_units(const std::filesystem::path& path, const std::vector<RunToFailureSeries>& units) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (const auto& s : units) {
    if (s.channels() > kCmapssSensors) {
      throw DataError(fmt::format("unit {}: {} sensors exceed the {}-sensor format", s.unit_id, s.channels(), kCmapssSensors));
    }
    if (s.settings.cols() != 0 && static_cast<std::size_t>(s.settings.cols()) != kCmapssSettings) {
      throw DataError(fmt::format("unit {}: expected {} settings columns", s.unit_id, kCmapssSettings));
    }
    for (Eigen::Index r = 0; r < s.sensors.rows(); ++r) {
      std::string line = fmt::format("{} {}", s.unit_id, r + 1);
      for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(kCmapssSettings); ++c) {
        line += fmt::format(" {}", s.settings.cols() ? s.settings(r, c) : 0.0);
      }
      for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(kCmapssSensors); ++c) {
        line += fmt::format(" {}", c < s.sensors.cols() ? s.sensors(r, c) : 0.0);
      }
      out << line << '\n';
    }
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace

void write_cmapss(const std::filesystem::path& dir, const std::string& name, const Dataset& data) {
  std::filesystem::create_directories(dir);
  write_cmapss_units(dir / ("train_" + name + ".txt"), data.train);
  write_cmapss_units(dir / ("test_" + name + ".txt"), data.test);
  std::ofstream out(dir / ("RUL_" + name + ".txt"));
  if (!out) throw IoError("cannot write RUL file in '" + dir.string() + "'");
  for (const auto& s : data.test) out << fmt::format("{}\n", s.final_rul);
}

// ---- milling ---------------------------------------------------------------------------------

std::vector<double> milling_run_labels(std::vector<double> wear) {
  const std::size_t n = wear.size();
  if (n == 0) return {};
  std::vector<std::size_t> known;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isnan(wear[i])) known.push_back(i);
  }
  if (known.empty()) throw DataError("no flank-wear measurement in case");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isnan(wear[i])) continue;
    auto hi = std::upper_bound(known.begin(), known.end(), i);
    if (hi == known.begin()) {
      wear[i] = wear[*hi];
    } else if (hi == known.end()) {
      wear[i] = wear[known.back()];
    } else {
      const std::size_t a = *(hi - 1), b = *hi;
      const double t = static_cast<double>(i - a) / static_cast<double>(b - a);
      wear[i] = wear[a] + t * (wear[b] - wear[a]);
    }
  }
  std::size_t failure = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (wear[i] > kWearThreshold) {
      failure = i;
      break;
    }
  }
  std::vector<double> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = failure > i ? static_cast<double>(failure - i) : 0.0;
  return labels;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

const std::vector<std::string>& milling_columns() {
  static const std::vector<std::string> cols{"case",     "run",       "material",    "doc",      "feed",
                                             "speed",    "smcAC",     "smcDC",       "vib_table", "vib_spindle",
                                             "AE_table", "AE_spindle", "VB"};
  return cols;
}

struct MillingRun {
  int run = 0;
  int material = 0;
  double wear = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::array<double, 3>> params;
  std::vector<std::array<double, 6>> sensors;
};

}  // namespace

Dataset load_milling(const std::filesystem::path& csv, std::string name) {
  auto in = open_input(csv);
  std::string line;
  if (!std::getline(in, line)) throw DataError(csv.string() + ": empty file");
  const auto header = split_csv(line);
  std::vector<std::size_t> index;
  std::vector<std::string> missing;
  for (const auto& col : milling_columns()) {
    auto it = std::find(header.begin(), header.end(), col);
    if (it == header.end()) {
      missing.push_back(col);
    } else {
      index.push_back(static_cast<std::size_t>(it - header.begin()));
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw DataError(csv.string() + ": missing columns: " + list);
  }

  std::map<int, std::map<int, MillingRun>> cases;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv(line);
    auto number = [&](std::size_t col, bool allow_empty) {
      const std::size_t at = index[col];
      if (at >= cells.size()) throw DataError(fmt::format("{}:{}: too few fields", csv.string(), line_no));
      const std::string& cell = cells[at];
      if (cell.empty() || cell == "NaN" || cell == "nan") {
        if (allow_empty) return std::numeric_limits<double>::quiet_NaN();
        throw DataError(fmt::format("{}:{}: empty '{}'", csv.string(), line_no, milling_columns()[col]));
      }
      char* end = nullptr;
      const double x = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0' || !std::isfinite(x)) {
        throw DataError(fmt::format("{}:{}: malformed '{}' value '{}'", csv.string(), line_no, milling_columns()[col], cell));
      }
      return x;
    };
    const int case_id = static_cast<int>(number(0, false));
    const int run_id = static_cast<int>(number(1, false));
    MillingRun& run = cases[case_id][run_id];
    run.run = run_id;
    run.material = static_cast<int>(number(2, false));
    run.params.push_back({number(3, false), number(4, false), number(5, false)});
    std::array<double, 6> s{};
    for (std::size_t c = 0; c < 6; ++c) s[c] = number(6 + c, false);
    run.sensors.push_back(s);
    const double vb = number(12, true);
    if (!std::isnan(vb)) run.wear = vb;
  }
  if (cases.empty()) throw DataError(csv.string() + ": no data rows");

  Dataset d;
  for (auto& [case_id, runs] : cases) {
    RunToFailureSeries s;
    s.unit_id = case_id;
    const auto n_runs = runs.size();
    const auto rows = static_cast<Eigen::Index>(n_runs * kMillingRunLength);
    s.sensors.resize(rows, 6);
    s.settings.resize(rows, 3);
    std::vector<double> wear;
    int material = runs.begin()->second.material;
    Eigen::Index r = 0;
    for (auto& [run_id, run] : runs) {
      if (run.sensors.size() != kMillingRunLength) {
        throw DataError(fmt::format("{}: case {} run {} has {} rows, expected {}", csv.string(), case_id, run_id,
                                    run.sensors.size(), kMillingRunLength));
      }
      if (run.material != material) throw DataError(fmt::format("{}: case {} mixes materials", csv.string(), case_id));
      for (std::size_t i = 0; i < kMillingRunLength; ++i, ++r) {
        for (Eigen::Index c = 0; c < 6; ++c) s.sensors(r, c) = run.sensors[i][static_cast<std::size_t>(c)];
        for (Eigen::Index c = 0; c < 3; ++c) s.settings(r, c) = run.params[i][static_cast<std::size_t>(c)];
      }
      wear.push_back(run.wear);
      s.evaluation_points.push_back(static_cast<std::size_t>(r));
    }
    const auto run_labels = milling_run_labels(std::move(wear));
    s.labels.reserve(static_cast<std::size_t>(rows));
    for (double y : run_labels) s.labels.insert(s.labels.end(), kMillingRunLength, y);
    s.change_point = kMillingRunLength;
    s.tag = "material" + std::to_string(material);
    d.train.push_back(std::move(s));
  }
  d.manifest.name = std::move(name);
  d.manifest.train_units = d.train.size();
  d.manifest.channel_names = std::vector<std::string>(milling_columns().begin() + 6, milling_columns().begin() + 12);
  d.manifest.operating_conditions = d.train.size();
  d.manifest.rul_max = 0.0;
  for (const auto& s : d.train) {
    d.manifest.rul_max = std::max(d.manifest.rul_max, *std::max_element(s.labels.begin(), s.labels.end()));
  }
  d.manifest.tags = distinct_tags(d.train, d.test);
  return d;
}

Dataset split_milling_protocol(Dataset all) {
  Dataset out;
  out.manifest = all.manifest;
  std::size_t type1 = 0, type2 = 0;
  for (auto& s : all.train) {
    bool train = false;
    if (s.tag == "material1") train = type1++ < 9;
    if (s.tag == "material2") train = type2++ < 2;
    (train ? out.train : out.test).push_back(std::move(s));
  }
  for (auto& s : all.test) out.test.push_back(std::move(s));
  out.manifest.train_units = out.train.size();
  out.manifest.test_units = out.test.size();
  return out;
}

// ---- synthetic ----------------------------------------------------------------------------------

void SyntheticSpec::validate() const {
  std::vector<std::string> p;
  if (latent_periods.empty()) p.push_back("synthetic.latent_periods must not be empty");
  for (double period : latent_periods) {
    if (!(period > 1.0)) p.push_back("synthetic.latent_periods entries must exceed 1");
  }
  if (channels < latent_periods.size()) p.push_back("synthetic.channels must be at least the latent count");
  if (degrading_latent >= latent_periods.size()) p.push_back("synthetic.degrading_latent out of range");
  if (!(degradation_slope > 0.0)) p.push_back("synthetic.degradation_slope must be positive");
  if (!(noise_scale >= 0.0)) p.push_back("synthetic.noise_scale must be non-negative");
  if (identity_mixing && channels != latent_periods.size()) {
    p.push_back("synthetic.identity_mixing requires channels == latent count");
  }
  if (channels > kCmapssSensors) p.push_back("synthetic.channels must not exceed 21");
  if (train_units < 1) p.push_back("synthetic.train_units must be positive");
  if (min_length > max_length) p.push_back("synthetic.min_length exceeds max_length");
  if (!(rul_max > 0.0)) p.push_back("synthetic.rul_max must be positive");
  if (static_cast<double>(min_length) <= rul_max) p.push_back("synthetic.min_length must exceed rul_max");
  if (min_truncation > max_truncation) p.push_back("synthetic.min_truncation exceeds max_truncation");
  if (max_truncation >= min_length) p.push_back("synthetic.max_truncation must be below min_length");
  if (!p.empty()) throw ConfigError(std::move(p));
}

nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"channels", s.channels},
          {"latent_periods", s.latent_periods},
          {"degrading_latent", s.degrading_latent},
          {"degradation_slope", s.degradation_slope},
          {"noise_scale", s.noise_scale},
          {"identity_mixing", s.identity_mixing},
          {"train_units", s.train_units},
          {"test_units", s.test_units},
          {"min_length", s.min_length},
          {"max_length", s.max_length},
          {"rul_max", s.rul_max},
          {"min_truncation", s.min_truncation},
          {"max_truncation", s.max_truncation}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  try {
    s.channels = j.value("channels", s.channels);
    s.latent_periods = j.value("latent_periods", s.latent_periods);
    s.degrading_latent = j.value("degrading_latent", s.degrading_latent);
    s.degradation_slope = j.value("degradation_slope", s.degradation_slope);
    s.noise_scale = j.value("noise_scale", s.noise_scale);
    s.identity_mixing = j.value("identity_mixing", s.identity_mixing);
    s.train_units = j.value("train_units", s.train_units);
    s.test_units = j.value("test_units", s.test_units);
    s.min_length = j.value("min_length", s.min_length);
    s.max_length = j.value("max_length", s.max_length);
    s.rul_max = j.value("rul_max", s.rul_max);
    s.min_truncation = j.value("min_truncation", s.min_truncation);
    s.max_truncation = j.value("max_truncation", s.max_truncation);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError({std::string("synthetic: ") + e.what()});
  }
  return s;
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
  const auto n_latent = static_cast<Eigen::Index>(spec.latent_periods.size());
  const auto n_channels = static_cast<Eigen::Index>(spec.channels);

  SyntheticDataset out;
  if (spec.identity_mixing) {
    out.mixing = Matrix::Identity(n_latent, n_channels);
  } else {
    out.mixing.resize(n_latent, n_channels);
    for (Eigen::Index i = 0; i < n_latent; ++i) {
      for (Eigen::Index c = 0; c < n_channels; ++c) out.mixing(i, c) = normal(rng);
    }
  }

  std::uniform_int_distribution<std::size_t> length(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::size_t> truncation(spec.min_truncation, spec.max_truncation);
  const auto rul_max = static_cast<std::size_t>(std::llround(spec.rul_max));
  const std::size_t total = spec.train_units + spec.test_units;
  for (std::size_t u = 0; u < total; ++u) {
    const std::size_t k_c = length(rng);
    const std::size_t k_cp = k_c - rul_max;
    Matrix latent(static_cast<Eigen::Index>(k_c), n_latent);
    for (Eigen::Index i = 0; i < n_latent; ++i) {
      const double offset = phase(rng);
      const double period = spec.latent_periods[static_cast<std::size_t>(i)];
      for (std::size_t k = 1; k <= k_c; ++k) {
        double v = std::sqrt(2.0) * std::sin(2.0 * M_PI * static_cast<double>(k) / period + offset);
        if (static_cast<std::size_t>(i) == spec.degrading_latent && k > k_cp) {
          v += spec.degradation_slope * static_cast<double>(k - k_cp);
        }
        latent(static_cast<Eigen::Index>(k - 1), i) = v;
      }
    }
    Matrix observed = latent * out.mixing;
    if (spec.noise_scale > 0.0) {
      for (Eigen::Index r = 0; r < observed.rows(); ++r) {
        for (Eigen::Index c = 0; c < observed.cols(); ++c) observed(r, c) += spec.noise_scale * normal(rng);
      }
    }

    RunToFailureSeries s;
    s.unit_id = static_cast<int>(u < spec.train_units ? u + 1 : u - spec.train_units + 1);
    s.tag = "synthetic";
    if (u < spec.train_units) {
      s.sensors = std::move(observed);
      s.settings = Matrix::Zero(s.sensors.rows(), kCmapssSettings);
      s.change_point = k_cp;
      out.data.train.push_back(std::move(s));
    } else {
      const std::size_t cut = truncation(rng);
      const auto keep = static_cast<Eigen::Index>(k_c - cut);
      s.sensors = observed.topRows(keep);
      s.settings = Matrix::Zero(keep, kCmapssSettings);
      s.final_rul = static_cast<double>(cut);
      s.change_point = change_point_for(static_cast<std::size_t>(keep), s.final_rul, spec.rul_max);
      s.labels = series_labels(s, spec.rul_max);
      out.data.test.push_back(std::move(s));
    }
    out.latents.push_back(std::move(latent));
  }

  auto& m = out.data.manifest;
  m.name = "SYN";
  m.train_units = out.data.train.size();
  m.test_units = out.data.test.size();
  for (std::size_t c = 1; c <= spec.channels; ++c) m.channel_names.push_back("s" + std::to_string(c));
  m.operating_conditions = 1;
  m.rul_max = spec.rul_max;
  m.tags = {"synthetic"};
  return out;
}

std::pair<std::vector<RunToFailureSeries>, std::vector<RunToFailureSeries>> split_units(
    const std::vector<RunToFailureSeries>& series, double validation_fraction, std::uint64_t seed) {
  if (series.size() < 2) throw DataError("split_units: at least two units are required");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError({"training.validation_fraction must be in (0, 1)"});
  }
  const std::size_t n = series.size();
  const auto wanted = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n)));
  const std::size_t n_val = std::clamp<std::size_t>(wanted, 1, n - 1);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the partition is identical across standard libraries.
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  std::vector<bool> is_val(n, false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;
  std::pair<std::vector<RunToFailureSeries>, std::vector<RunToFailureSeries>> out;
  for (std::size_t i = 0; i < n; ++i) (is_val[i] ? out.second : out.first).push_back(series[i]);
  return out;
}

}  // namespace sdtc
