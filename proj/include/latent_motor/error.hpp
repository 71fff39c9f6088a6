#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace latent_motor {

/// Invalid user-supplied configuration: bad dimensions, out-of-range indices,
/// unknown config keys.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A vector too close to zero to be projected onto the unit sphere.
class DegenerateEmbedding : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Broken internal contract, e.g. a backward pass fed a cache from a
/// different forward pass.
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed checkpoint or config text. `byte_offset` points at the first
/// offending byte when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : std::runtime_error(what + " (at byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}

  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

}  // namespace latent_motor
