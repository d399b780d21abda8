#pragma once

#include <stdexcept>
#include <string>

namespace detflow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Vector/matrix shape disagreement, or a non-finite input value.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Operator is singular (LU sign 0); estimation refuses to run on it.
class SingularOperatorError : public Error {
 public:
  using Error::Error;
};

/// A point hit the degenerate locus of the cylinder chart.
class PoleError : public Error {
 public:
  using Error::Error;
};

/// Non-finite intermediate inside a recorded computation.
class DiffError : public Error {
 public:
  DiffError(const std::string& primitive, const std::string& what)
      : Error("diffgraph primitive '" + primitive + "': " + what), primitive_(primitive) {}
  const std::string& primitive() const { return primitive_; }

 private:
  std::string primitive_;
};

/// Estimator-level failure (weight overflow, degenerate flow, ...).
class EstimatorError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration file, fixture name, or checkpoint.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace detflow
