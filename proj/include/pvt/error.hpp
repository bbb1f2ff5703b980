// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Error type shared by every module. One exception class carrying a code;
// callers that care about the category switch on code().

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pvt {

enum class ErrorCode {
    ShapeMismatch,
    DTypeMismatch,
    NotScalar,
    NoTape,
    InvalidSchema,
    SequenceTooLong,
    UnknownSite,
    EmptyDataset,
    DimMismatch,
    SubspaceOutOfRange,
    DuplicateName,
    UnknownKind,
    MalformedDocument,
    SerialOrderViolation,
    IndexShapeMismatch,
    MissingSource,
    LocationOutOfRange,
    TimeStepOutOfRange,
    IoFailure,
    ChecksumMismatch,
    SchemaDigestMismatch,
    VersionUnsupported,
    UnknownToken,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

}  // namespace pvt
