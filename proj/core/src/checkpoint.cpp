#include "sdtc/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "sdtc/error.hpp"

namespace sdtc {

std::size_t parameter_count(const ParameterSet& params) {
  std::size_t total = 0;
  for (const auto& [name, tensor] : params) total += tensor.size();
  return total;
}

nlohmann::json to_json(const ParameterSet& params) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [name, tensor] : params) {
    nlohmann::json entry;
    entry["shape"] = tensor.shape();
    entry["data"] = std::vector<double>(tensor.values().begin(), tensor.values().end());
    doc[name] = std::move(entry);
  }
  return doc;
}

ParameterSet parameters_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw DataError("checkpoint: expected a JSON object of named arrays");
  ParameterSet params;
  for (const auto& [name, entry] : doc.items()) {
    if (!entry.is_object() || !entry.contains("shape") || !entry.contains("data")) {
      throw DataError("checkpoint: entry '" + name + "' needs 'shape' and 'data'");
    }
    try {
      params.emplace(name, Tensor(entry.at("shape").get<Shape>(), entry.at("data").get<std::vector<double>>()));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("checkpoint: entry '" + name + "': " + e.what());
    } catch (const ShapeError& e) {
      throw DataError("checkpoint: entry '" + name + "': " + e.what());
    }
  }
  return params;
}

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  write_text_file(path, to_json(params).dump(1) + "\n");
}

ParameterSet load_checkpoint(const std::filesystem::path& path) { return parameters_from_json(read_json_file(path)); }

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace sdtc
