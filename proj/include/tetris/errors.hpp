#pragma once

#include <stdexcept>
#include <string>

namespace tetris {

// Every failure raised by the library derives from Error so callers (the CLI in
// particular) can map families of failures onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A distribution parameter outside its domain (non-positive shape, negative
// Poisson mean, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Factorization failures, NaN propagation and similar.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A domain type whose invariants do not hold.
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Shapes that do not agree between two inputs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace tetris
