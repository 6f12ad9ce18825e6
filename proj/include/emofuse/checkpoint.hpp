#pragma once

// Parameter dump/load: a flat little-endian float64 blob plus a JSON
// manifest listing (name, shape, byte offset) per entry and an arbitrary
// config block. Loading validates names and shapes against the manifest.

#include <string>
#include <vector>

#include "emofuse/tensor.hpp"
#include "json.hpp"

namespace emofuse::diff {

// Writes <stem>.bin and <stem>.json.
void save_parameters(const std::string& stem, const std::vector<Parameter*>& params,
                     const nlohmann::json& config = nlohmann::json::object());

// Reads the config block without touching parameter data.
nlohmann::json load_manifest_config(const std::string& stem);

// Loads values into the given parameters. Every parameter must appear in the
// manifest with a matching shape; extra manifest entries are an error too.
void load_parameters(const std::string& stem, const std::vector<Parameter*>& params);

}  // namespace emofuse::diff
