#pragma once

#include <stdexcept>
#include <string>

namespace cytograd {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or dimensions that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by a forward or backward computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Training loss became non-finite. Carries the epoch and batch where it happened.
class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t epoch, std::size_t batch, const std::string& what)
      : NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                     std::to_string(batch) + ": " + what),
        epoch_(epoch),
        batch_(batch) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

/// Input data that violates a documented precondition (labels, masks, probabilities).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed configuration or checkpoint content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File system failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace cytograd
