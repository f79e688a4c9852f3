#pragma once

#include <stdexcept>
#include <string>

namespace mmfsod {

// Malformed input file (JSON syntax, wrong field types). The message names the line when known.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed input that breaks a domain invariant (duplicates, empty text, overlapping splits).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand dimensions disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Requested feature backend is not registered or failed.
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A loss or gradient became NaN or infinite during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mmfsod
