#pragma once

#include <stdexcept>
#include <string>

namespace infosteer {

// Every error carries a short machine-readable kind so the CLI can emit a
// one-line parsable message without string matching.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& message) : Error("shape", message) {}
};

class DomainError : public Error {
public:
    explicit DomainError(const std::string& message) : Error("domain", message) {}
};

class GraphError : public Error {
public:
    explicit GraphError(const std::string& message) : Error("graph", message) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message) : Error("config", message) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error("io", message) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& message) : Error("data", message) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& message) : Error("numeric", message) {}
};

}  // namespace infosteer
