// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gtca {

/// Malformed or inconsistent input data (files, records, configs). The CLI
/// maps these to exit code 2.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Stored bytes whose checksum does not match.
class ChecksumError : public InputError {
public:
    using InputError::InputError;
};

/// Syntax error at a character offset of the parsed text.
class ParseError : public InputError {
public:
    ParseError(const std::string& what, std::size_t offset)
        : InputError(what + " at offset " + std::to_string(offset)), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace gtca
