#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace opensat {

enum class ErrorCode {
    InvalidArgument,
    DimensionMismatch,
    DegenerateVector,
    EmptyImage,
    RectOutOfBounds,
    ImageDecodeError,
    UnsupportedFormat,
    ProviderUnavailable,
    EmbeddingNotFound,
    ManifestParseError,
    ContextParseError,
    DeficientContext,
    DuplicateTile,
    EmptyStore,
    StoreLocked,
    UnknownClass,
    NotFound,
    Conflict,
    ConfigError,
    IoError,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace opensat
