#pragma once

#include <stdexcept>
#include <string>

namespace skillprobe {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class InputError : public Error { using Error::Error; };
class ParseError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class StateError : public Error { using Error::Error; };
class VocabError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class NumericalError : public Error { using Error::Error; };

// Raised when a pipeline stage runs before the stage it depends on.
class DependencyError : public Error { using Error::Error; };

}  // namespace skillprobe
