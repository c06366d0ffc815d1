#pragma once

#include <stdexcept>
#include <string>

namespace cdfnet {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file header (bad magic, ndim/dtype inconsistency).
struct FormatError : Error {
  using Error::Error;
};

// Unknown version or dtype byte.
struct VersionError : Error {
  using Error::Error;
};

// File shorter or longer than its header promises.
struct LengthError : Error {
  using Error::Error;
};

// Shape or channel-count mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Checkpoint does not match the model it is loaded into.
struct CheckpointError : Error {
  using Error::Error;
};

// Invalid configuration value.
struct ConfigError : Error {
  using Error::Error;
};

// Bad command-line usage.
struct UsageError : Error {
  using Error::Error;
};

// Dataset directory contents disagree with the manifest.
struct IntegrityError : Error {
  using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
  using Error::Error;
};

// Internal data corruption (e.g. a pooling index outside its window).
struct CorruptionError : Error {
  using Error::Error;
};

// Label value out of range for the configured class count.
struct LabelError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace cdfnet
