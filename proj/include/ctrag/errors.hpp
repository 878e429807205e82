#pragma once

#include <stdexcept>
#include <string>

namespace ctrag {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Byte-stream or filesystem failure (unreadable source, failed sink write).
struct IoError : Error {
    using Error::Error;
};

/// Malformed container or serialized input: bad magic, unsupported version,
/// payload length mismatch, invalid mask byte, unparseable JSON/JSONL line.
struct FormatError : Error {
    using Error::Error;
};

/// Violated invariant or contract: schema mismatch, duplicate entry ids,
/// bad config field, geometry-incompatible grids.
struct ValidationError : Error {
    using Error::Error;
};

/// HTTP transport failure after exhausting retries, or a malformed response.
struct TransportError : Error {
    using Error::Error;
};

/// Scripted backend ran out of fixtures or no fixture matched the request.
struct FixtureError : Error {
    using Error::Error;
};

} // namespace ctrag
