#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lami {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class MaskError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class ContextLengthError : public Error { using Error::Error; };
class TemplateError : public Error { using Error::Error; };
class GenerationError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };
class MeasurementError : public Error { using Error::Error; };

class TrainingError : public Error {
 public:
  TrainingError(std::size_t step, const std::string& what)
      : Error("training failed at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class FormatError : public Error {
 public:
  FormatError(std::size_t offset, const std::string& what)
      : Error("checkpoint format error at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace lami
