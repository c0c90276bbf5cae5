#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ap {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;
using TokenView = std::span<const TokenId>;

// Error taxonomy shared by the C++ core and mirrored by the C API status codes.
enum class ErrorKind {
    invalid_argument,  // bad token id, bad length, bad parameter value
    io,                // file not readable/writable, malformed checkpoint
    config,            // run configuration invalid
    unsupported,       // capability not available (e.g. remote gradients)
    network,           // remote backend unreachable after retries
    protocol,          // remote payload malformed or shape mismatch
    numerical,         // non-finite values where finiteness is required
    state,             // missing stage output, precondition on data not met
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool ok, ErrorKind kind, const std::string& msg) {
    if (!ok) fail(kind, msg);
}

} // namespace ap
