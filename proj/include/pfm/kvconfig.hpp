#pragma once

#include <map>
#include <string>

namespace pfm {

/// Flat `key = value` configuration file; '#' starts a comment, blank lines
/// are ignored. Malformed lines raise with the line number.
std::map<std::string, std::string> parse_kv_file(const std::string& path);

}  // namespace pfm
