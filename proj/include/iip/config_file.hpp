#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace iip {

/// Flat `key = value` text: one entry per line, `#` starts a comment,
/// surrounding whitespace is ignored. Duplicate keys are rejected.
std::map<std::string, std::string> parse_key_values(std::string_view text, const std::string& source = "config");
std::map<std::string, std::string> load_key_values(const std::filesystem::path& path);

}  // namespace iip
