#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace qlab {

/// Shortest decimal text that parses back to exactly `value`.
std::string format_number(double value);

/// Minimal RFC 4180 reader/writer helpers (no embedded newlines in fields).
std::string csv_escape(std::string_view field);
std::vector<std::string> csv_split(std::string_view line);

}  // namespace qlab
