#pragma once

#include <stdexcept>
#include <string>

namespace bat {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible shapes, axes or extents.
struct DimensionError : Error {
  using Error::Error;
};

/// A non-finite value reached an operation that requires finite input,
/// or an operation produced one.
struct NumericError : Error {
  using Error::Error;
};

/// A reduction or attention slice ended up with no valid elements.
struct DegenerateError : Error {
  using Error::Error;
};

/// Invalid argument values (levels, specs, ranges, counts).
struct ArgumentError : Error {
  using Error::Error;
};

/// Operation called on an object in the wrong state (e.g. un-standardized
/// data fed to the embedding, mutation of a non-leaf tensor).
struct StateError : Error {
  using Error::Error;
};

/// File parsing / schema violations; message carries the line number when known.
struct DataError : Error {
  using Error::Error;
};

/// Sensor name not resolvable through the registry.
struct RegistryError : Error {
  using Error::Error;
};

/// Metric preconditions violated (single-class input, no positives).
struct MetricError : Error {
  using Error::Error;
};

/// Training diverged or could not be carried out.
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace bat
