#pragma once

#include <stdexcept>
#include <string>

namespace mobileage {

/// Base class for every failure raised by the toolkit. The CLI maps the
/// concrete subclass onto a process exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    [[nodiscard]] virtual int exit_code() const noexcept { return 1; }
};

/// Invalid configuration or argument (exit 2).
class ConfigError : public Error {
public:
    using Error::Error;
    [[nodiscard]] int exit_code() const noexcept override { return 2; }
};

/// Missing, unreadable or inconsistent data and artifacts (exit 3).
class DataError : public Error {
public:
    using Error::Error;
    [[nodiscard]] int exit_code() const noexcept override { return 3; }
};

/// Non-finite values or other numerical breakdown (exit 4).
class NumericalError : public Error {
public:
    using Error::Error;
    [[nodiscard]] int exit_code() const noexcept override { return 4; }
};

inline void require(bool cond, const std::string& what)
{
    if (!cond) throw ConfigError(what);
}

} // namespace mobileage
