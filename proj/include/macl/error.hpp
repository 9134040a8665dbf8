// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace macl {

// All library failures derive from Error so callers can map them to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

// Branch outputs would not line up spatially (lambda != 2^-N).
class AlignmentError : public Error {
public:
    explicit AlignmentError(const std::string& what) : Error("alignment error: " + what) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error("contract violation: " + what) {}
};

class SamplingError : public Error {
public:
    explicit SamplingError(const std::string& what) : Error("sampling error: " + what) {}
};

class TransferError : public Error {
public:
    explicit TransferError(const std::string& what) : Error("transfer error: " + what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("io error: " + what) {}
};

} // namespace macl
