#pragma once

#include <stdexcept>
#include <string>

namespace cqr {

/// Bad caller-supplied configuration or argument (overlap >= size, beta <= 0, ...).
class ParameterError : public std::invalid_argument {
public:
    explicit ParameterError(const std::string& what) : std::invalid_argument(what) {}
};

/// Malformed input data (unparseable line, bad record field).
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(line ? what + " (line " + std::to_string(line) + ")" : what),
          line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// Well-formed input that violates a domain invariant (duplicate id, turn gap).
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Metric requested on an input where it is undefined (empty gold set, no evaluable turns).
class MetricError : public std::runtime_error {
public:
    explicit MetricError(const std::string& what) : std::runtime_error(what) {}
};

/// Remote call failed after the retry budget was spent.
class TransportError : public std::runtime_error {
public:
    explicit TransportError(const std::string& what) : std::runtime_error(what) {}
};

/// Backend rejected the credential.
class CredentialError : public std::runtime_error {
public:
    explicit CredentialError(const std::string& what) : std::runtime_error(what) {}
};

/// Backend answered but the payload does not match the wire contract.
class ProtocolError : public std::runtime_error {
public:
    explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

/// Backend lacks a required feature (log-probabilities, dense retrieval).
class CapabilityError : public std::runtime_error {
public:
    explicit CapabilityError(const std::string& what) : std::runtime_error(what) {}
};

/// Artifact directory cannot be resumed (corrupt or mismatched manifest).
class ResumeError : public std::runtime_error {
public:
    explicit ResumeError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace cqr
