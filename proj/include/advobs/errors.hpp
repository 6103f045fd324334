#pragma once

#include <stdexcept>
#include <string>

namespace advobs {

// Base of every error raised by the library. The CLI maps ConfigError to
// exit code 2 and every other Error to exit code 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define ADVOBS_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
  }

ADVOBS_DEFINE_ERROR(EmptyRegion);
ADVOBS_DEFINE_ERROR(ShapeMismatch);
ADVOBS_DEFINE_ERROR(UnknownVariable);
ADVOBS_DEFINE_ERROR(NumericalBlowup);
ADVOBS_DEFINE_ERROR(InsufficientData);
ADVOBS_DEFINE_ERROR(DegenerateVariance);
ADVOBS_DEFINE_ERROR(BadInterval);
ADVOBS_DEFINE_ERROR(BadNoiseOrder);
ADVOBS_DEFINE_ERROR(BadStepCount);
ADVOBS_DEFINE_ERROR(TapeMismatch);
ADVOBS_DEFINE_ERROR(UnknownVariant);
ADVOBS_DEFINE_ERROR(NoCrossing);
ADVOBS_DEFINE_ERROR(DegenerateSample);
ADVOBS_DEFINE_ERROR(NoEventFound);
ADVOBS_DEFINE_ERROR(ConfigError);
ADVOBS_DEFINE_ERROR(IoError);

#undef ADVOBS_DEFINE_ERROR

}  // namespace advobs
