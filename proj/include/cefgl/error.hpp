#pragma once

#include <stdexcept>
#include <string>

namespace cefgl {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CEFGL_DEFINE_ERROR(Name)        \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  }

// linalg
CEFGL_DEFINE_ERROR(NonFiniteInput);
CEFGL_DEFINE_ERROR(ShapeMismatch);
// compress
CEFGL_DEFINE_ERROR(ZeroVector);
CEFGL_DEFINE_ERROR(BadBits);
CEFGL_DEFINE_ERROR(MalformedPayload);
// graphdata
CEFGL_DEFINE_ERROR(MissingFile);
CEFGL_DEFINE_ERROR(ParseError);
CEFGL_DEFINE_ERROR(IndexOutOfRange);
CEFGL_DEFINE_ERROR(BadSpec);
CEFGL_DEFINE_ERROR(BadRatios);
CEFGL_DEFINE_ERROR(BadMode);
// fedcore
CEFGL_DEFINE_ERROR(DivergenceDetected);
// harness
CEFGL_DEFINE_ERROR(ConfigError);
CEFGL_DEFINE_ERROR(IoError);
CEFGL_DEFINE_ERROR(VersionMismatch);

#undef CEFGL_DEFINE_ERROR

}  // namespace cefgl
