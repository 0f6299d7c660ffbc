#pragma once

#include <stdexcept>
#include <string>

namespace adapi {

// Root of every error raised by the library. The CLI maps each subclass to a
// distinct process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EncodingOverflow : public Error {
 public:
  using Error::Error;
};

// Misuse of an interactive protocol: mismatched parties or shapes, reused
// triples, failed OT decode, digest mismatch between server and client.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Corrupt or incompatible on-disk artifacts (checksums, magic, headers).
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace adapi

#define ADAPI_ENFORCE(cond, ErrorType, msg)          \
  do {                                               \
    if (!(cond)) {                                   \
      throw ErrorType(std::string(msg));             \
    }                                                \
  } while (0)
