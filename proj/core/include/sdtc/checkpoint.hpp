#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "sdtc/tensor.hpp"

namespace sdtc {

/// Named trainable arrays. Ordered by name so iteration (and serialization) is deterministic.
using ParameterSet = std::map<std::string, Tensor>;

std::size_t parameter_count(const ParameterSet& params);

// Checkpoint document: {"<name>": {"shape": [..], "data": [..]}, ...}.
// Doubles are written in shortest round-trip form, so load(save(p)) == p bit for bit.
nlohmann::json to_json(const ParameterSet& params);
ParameterSet parameters_from_json(const nlohmann::json& doc);

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_checkpoint(const std::filesystem::path& path);

// Small file helpers shared by every artifact writer.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace sdtc
