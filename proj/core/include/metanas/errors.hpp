#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metanas {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Values outside their legal domain (labels, rewards, probabilities).
struct ValueError : Error {
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

// Bad configuration: non-positive learning rates, impossible pool sizes,
// missing config fields.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed architecture strings (wrong skip-vector lengths, depth mismatch).
struct ArchError : Error {
    explicit ArchError(const std::string& msg) : Error(msg) {}
};

// Text parse failure; `token_index` is the 0-based index of the offending
// token in the input stream.
struct ParseError : Error {
    ParseError(const std::string& msg, std::size_t token_index)
        : Error(msg + " (token " + std::to_string(token_index) + ")"),
          token_index(token_index) {}
    std::size_t token_index;
};

}  // namespace metanas
