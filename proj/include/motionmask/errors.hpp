#pragma once

#include <stdexcept>
#include <string>

namespace motionmask {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or width mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value, schedule, or codebook.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Loss or gradient became non-finite during training.
class TrainingError : public Error {
public:
    using Error::Error;
};

/// A caller-supplied function broke its contract (e.g. non-deterministic loss).
class ContractError : public Error {
public:
    using Error::Error;
};

class SequenceTooShortError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

/// Malformed or incompatible file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A pipeline stage was run before the stage it depends on.
class StageError : public Error {
public:
    StageError(const std::string& missing_stage, const std::string& detail)
        : Error("missing upstream stage '" + missing_stage + "': " + detail), stage_(missing_stage) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

} // namespace motionmask
