#pragma once

#include <stdexcept>
#include <string>

namespace hsim {

// Error taxonomy shared by the library and the CLI exit-code mapping.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : Error { using Error::Error; };        // malformed input text
struct ValidationError : Error { using Error::Error; };   // structurally invalid model/workload
struct ConfigError : Error { using Error::Error; };       // bad or unknown configuration
struct IoError : Error { using Error::Error; };           // filesystem failures
struct DomainError : Error { using Error::Error; };       // value outside an operation's domain
struct DimensionError : Error { using Error::Error; };    // mismatched vector/matrix dims
struct StateError : Error { using Error::Error; };        // operation called in the wrong phase
struct ManifestError : Error { using Error::Error; };     // weight manifest inconsistency
struct OracleScaleError : Error { using Error::Error; };  // event-driven replay guard exceeded
struct DivergedError : Error { using Error::Error; };     // training loss became non-finite

}  // namespace hsim
