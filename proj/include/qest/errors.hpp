#pragma once

#include <stdexcept>
#include <string>

namespace qest {

/// Base class for all domain errors raised by this library.
struct Error : std::runtime_error {
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code(std::move(code)) {}
  std::string code;
};

#define QEST_DEFINE_ERROR(NAME)                          \
  struct NAME : Error {                                  \
    explicit NAME(const std::string& what = #NAME)       \
        : Error(#NAME, what) {}                          \
  }

QEST_DEFINE_ERROR(InvalidGeometry);
QEST_DEFINE_ERROR(ConfigError);
QEST_DEFINE_ERROR(EmptyInput);
QEST_DEFINE_ERROR(NonPositiveSpeed);
QEST_DEFINE_ERROR(ZeroSpeed);
QEST_DEFINE_ERROR(LengthMismatch);
QEST_DEFINE_ERROR(ShapeMismatch);
QEST_DEFINE_ERROR(DegenerateDensities);
QEST_DEFINE_ERROR(InvalidBreakpoints);
QEST_DEFINE_ERROR(EmptyEstimates);
QEST_DEFINE_ERROR(TooFewSimulations);
QEST_DEFINE_ERROR(DivergenceDetected);

#undef QEST_DEFINE_ERROR

}  // namespace qest
