#include "infosteer/text.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "infosteer/error.hpp"

namespace infosteer::text {

std::string_view trim(std::string_view s) {
    const auto is_space = [](char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    };
    while (!s.empty() && is_space(s.front())) {
        s.remove_prefix(1);
    }
    while (!s.empty() && is_space(s.back())) {
        s.remove_suffix(1);
    }
    return s;
}

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            parts.emplace_back(s.substr(start));
            break;
        }
        parts.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return parts;
}

std::string format_double(double value) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

std::string format_fixed(double value, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, value);
    return buf;
}

double parse_double(const std::string& s, const std::string& what) {
    const std::string t(trim(s));
    if (t.empty()) {
        throw ConfigError(what + ": expected a number, got an empty value");
    }
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size() || errno == ERANGE) {
        throw ConfigError(what + ": '" + t + "' is not a number");
    }
    return v;
}

long long parse_int(const std::string& s, const std::string& what) {
    const std::string t(trim(s));
    long long v = 0;
    const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
        throw ConfigError(what + ": '" + t + "' is not an integer");
    }
    return v;
}

std::size_t parse_size(const std::string& s, const std::string& what) {
    const long long v = parse_int(s, what);
    if (v < 0) {
        throw ConfigError(what + ": must be nonnegative, got " + std::to_string(v));
    }
    return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& s, const std::string& what) {
    const std::string t(trim(s));
    if (t == "true" || t == "1" || t == "yes" || t == "on") {
        return true;
    }
    if (t == "false" || t == "0" || t == "no" || t == "off") {
        return false;
    }
    throw ConfigError(what + ": '" + t + "' is not a boolean");
}

}  // namespace infosteer::text
