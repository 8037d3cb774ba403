#pragma once

#include <stdexcept>
#include <string>

namespace gfg {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Graph construction and validation.
class ParseError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class CycleError : public ValidationError { using ValidationError::ValidationError; };
class LinkTargetError : public ValidationError { using ValidationError::ValidationError; };
class CollectionOverlapError : public ValidationError { using ValidationError::ValidationError; };
class ArityError : public ValidationError { using ValidationError::ValidationError; };
class ShapeError : public ValidationError { using ValidationError::ValidationError; };
class NameError : public ValidationError { using ValidationError::ValidationError; };
class SubsetError : public ValidationError { using ValidationError::ValidationError; };
class ReplicationError : public ValidationError { using ValidationError::ValidationError; };

// Execution.
class PredicateError : public Error { using Error::Error; };
class DomainError : public Error { using Error::Error; };
class UnsupportedError : public Error { using Error::Error; };

// Inference.
class OwnershipError : public Error { using Error::Error; };
class DivergenceError : public Error { using Error::Error; };
class UncoveredNodeError : public Error { using Error::Error; };
class MissingMessageError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };

// Oracles.
class TooLargeError : public Error { using Error::Error; };
class SupportMismatchError : public Error { using Error::Error; };

// Idioms.
class SlotSignatureError : public Error { using Error::Error; };
class BindingError : public Error { using Error::Error; };

}  // namespace gfg
