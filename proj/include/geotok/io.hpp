#pragma once

// File helpers and run manifests.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace geotok::io {

inline constexpr const char* kVersion = "1.0.0";

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

// IoError when the file is missing or unreadable.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string hash_file(const std::filesystem::path& path);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

// Writes <out_dir>/manifest.json describing one command run: the resolved
// config with its hash, the seed, and FNV-1a hashes of every input and output.
void write_manifest(const std::filesystem::path& out_dir, const std::string& command, const nlohmann::json& config,
                    const nlohmann::json& seed, const std::vector<std::filesystem::path>& inputs,
                    const std::vector<std::filesystem::path>& outputs);

}  // namespace geotok::io
