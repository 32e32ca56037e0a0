#pragma once

#include <stdexcept>
#include <string>

namespace cdistill {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes incompatible with the requested op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration (schema, hyperparameters, model geometry).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Unusable input data: empty corpus, missing files, bad vocab.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or parameter values.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Alignment preconditions (layer divisibility, minimum depth) violated.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// Bad neuron selector or activation override.
class InterventionError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public DataError {
 public:
  enum class Kind { kIo, kCorruptHeader, kManifestMismatch, kTruncatedPayload, kVocabMismatch };

  CheckpointError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace cdistill
