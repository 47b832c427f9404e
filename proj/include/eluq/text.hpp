#pragma once

// Parsing and formatting helpers shared by every key=value config and
// file header.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace eluq {

/// Shortest representation that parses back to the same double.
std::string format_double(double v);
std::string format_list(const std::vector<std::size_t>& v);
std::string format_list(const std::vector<double>& v);

// All parsers throw ConfigError naming the key on malformed input.
double parse_double(const std::string& key, const std::string& text);
std::uint64_t parse_u64(const std::string& key, const std::string& text);
bool parse_bool(const std::string& key, const std::string& text);
std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& text);
std::vector<double> parse_double_list(const std::string& key, const std::string& text);

/// Splits "key=value"; returns false when there is no '='. Surrounding
/// whitespace is trimmed from both parts.
bool split_key_value(const std::string& line, std::string& key, std::string& value);

using KeyValues = std::vector<std::pair<std::string, std::string>>;

}  // namespace eluq
