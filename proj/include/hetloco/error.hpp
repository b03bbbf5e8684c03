// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hetloco {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// QR input whose columns are (numerically) linearly dependent.
class DegenerateBasisError : public Error {
public:
    using Error::Error;
};

/// Invalid stage split of a model.
class PartitionError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or activations. Carries the replica and stage that produced them.
class NumericalError : public Error {
public:
    NumericalError(const std::string& what, int replica = -1, int stage = -1)
        : Error(what), replica_(replica), stage_(stage) {}

    int replica() const noexcept { return replica_; }
    int stage() const noexcept { return stage_; }

private:
    int replica_;
    int stage_;
};

/// Outer round invoked with a missing or extra replica contribution.
class SyncError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated byte stream.
class WireFormatError : public Error {
public:
    using Error::Error;
};

/// Invalid run configuration. `key` names the offending entry when known.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what, std::string key = {})
        : Error(what), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

/// Corpus missing or too small for the requested sharding.
class CorpusError : public Error {
public:
    using Error::Error;
};

}  // namespace hetloco
