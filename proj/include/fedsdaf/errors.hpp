#pragma once

#include <stdexcept>
#include <string>

namespace fedsdaf {

// Tensor shape / conformance violation. Messages name the op and both shapes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A call-contract violation (non-scalar backward target, label out of range, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid run or model configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Config schema violation; carries the offending field path.
struct SchemaError : ConfigError {
  SchemaError(std::string field_path, const std::string& what)
      : ConfigError(field_path + ": " + what), path(std::move(field_path)) {}
  std::string path;
};

// Federation protocol violation (missing upload, unexpected message).
struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed serialized payload.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fedsdaf
