#pragma once

#include <stdexcept>
#include <string>

namespace ciuap {

// Exit codes used by the command-line front end.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    usage = 2,
    dependency = 3,
    numerical = 4,
};

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what, ExitCode code = ExitCode::failure)
        : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

// Bad or unknown configuration (unknown dataset, arch, layer id, key...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("configuration error: " + what, ExitCode::usage) {}
};

// A caller broke an operation's precondition (shape mismatch, empty input...).
class ContractViolation : public Error {
public:
    explicit ContractViolation(const std::string& what)
        : Error("contract violation: " + what, ExitCode::usage) {}
};

// An upstream artifact is missing or fails checksum validation.
class DependencyError : public Error {
public:
    explicit DependencyError(const std::string& what)
        : Error("dependency error: " + what, ExitCode::dependency) {}
};

// NaN/Inf during training or synthesis.
class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& what)
        : Error("numerical failure: " + what, ExitCode::numerical) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractViolation(what);
}

} // namespace ciuap
