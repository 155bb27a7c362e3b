#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mrgmm {

// Root of every error raised by the library. The CLI maps ArgumentError to
// exit status 2 and everything else to 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

// A precondition between cooperating objects was violated (e.g. a step-2
// fit without its first-step anchor).
class ContractError : public Error {
public:
    using Error::Error;
};

class EvaluationError : public Error {
public:
    EvaluationError(const std::string& what, std::size_t observation)
        : Error(what + " (observation " + std::to_string(observation) + ")"),
          observation_(observation) {}
    explicit EvaluationError(const std::string& what)
        : Error(what), observation_(static_cast<std::size_t>(-1)) {}

    std::size_t observation() const noexcept { return observation_; }

private:
    std::size_t observation_;
};

class SingularMatrixError : public Error {
public:
    SingularMatrixError(const std::string& what, double condition)
        : Error(what + " (condition estimate " + std::to_string(condition) + ")"),
          condition_(condition) {}

    double condition() const noexcept { return condition_; }

private:
    double condition_;
};

// A variance diagonal entry used for studentization is not positive.
class VarianceInvalidError : public Error {
public:
    using Error::Error;
};

class BootstrapDegenerateError : public Error {
public:
    using Error::Error;
};

class QuantileUnavailableError : public Error {
public:
    using Error::Error;
};

}  // namespace mrgmm
