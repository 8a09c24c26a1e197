#pragma once

#include <stdexcept>
#include <string>

namespace markov_mamba {

// Shapes that cannot be combined (recorded op or bound input).
class StructuralError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Numeric domain violation at evaluation time, e.g. log of a non-positive value.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Caller broke a precondition of an operation.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid user-supplied parameter (order, concentration, epsilon, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace markov_mamba
