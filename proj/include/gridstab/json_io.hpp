#pragma once

#include <filesystem>

#include <json.hpp>

namespace gridstab {

// Throws MissingFile / ParseError.
nlohmann::json read_json_file(const std::filesystem::path& path);
// Writes atomically (temp file + rename); throws IoFailure.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j, int indent = -1);

}  // namespace gridstab
