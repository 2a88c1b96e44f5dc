#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace vqg::tools {

inline constexpr const char* kToolVersion = "0.1.0";

// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  nlohmann::json flags = nlohmann::json::object();
  std::vector<std::filesystem::path> inputs;
  double duration_seconds = 0.0;
};

// Written next to an output as <output>.manifest.json.
std::filesystem::path manifest_path_for(const std::filesystem::path& output);
void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);

}  // namespace vqg::tools
