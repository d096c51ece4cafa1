#pragma once

#include <stdexcept>
#include <string>

namespace geotok {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Argument outside the documented domain (coordinates, timestamps, ...).
class InvalidInput : public Error {
public:
    using Error::Error;
};

class OutOfVocabulary : public Error {
public:
    OutOfVocabulary(std::size_t level, const std::string& what)
        : Error(what), level_(level) {}
    // 1-based hierarchy level at which the lookup failed.
    std::size_t level() const noexcept { return level_; }

private:
    std::size_t level_;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// Malformed or truncated file, bad magic, version mismatch.
class FormatError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    ConfigError(std::string key, const std::string& what) : Error(what), key_(std::move(key)) {}
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class IoError : public Error {
public:
    using Error::Error;
};

class NonFiniteError : public Error {
public:
    using Error::Error;
};

}  // namespace geotok
