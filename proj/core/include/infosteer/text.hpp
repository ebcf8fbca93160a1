#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace infosteer::text {

std::string_view trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

// Shortest form that parses back to the identical double.
std::string format_double(double value);
std::string format_fixed(double value, int decimals);

double parse_double(const std::string& s, const std::string& what);
long long parse_int(const std::string& s, const std::string& what);
std::size_t parse_size(const std::string& s, const std::string& what);
bool parse_bool(const std::string& s, const std::string& what);

}  // namespace infosteer::text
