#pragma once

#include <stdexcept>
#include <string>

namespace cinet {

// Error taxonomy shared by the library and the CLI. Every throwing path uses
// one of these so the CLI can map failures onto stable exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };       // rank or extent mismatch
struct ValueError : Error { using Error::Error; };       // non-finite or out-of-domain values
struct ContractError : Error { using Error::Error; };    // API misuse (non-scalar loss, empty batch)
struct IndexError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct DataError : Error { using Error::Error; };
struct CheckpointError : Error { using Error::Error; };
struct DivergenceError : Error { using Error::Error; };
struct UsageError : Error { using Error::Error; };

}  // namespace cinet
