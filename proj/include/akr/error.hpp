#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace akr {

enum class ErrorCode {
    EmptyDocument,
    MalformedMarkup,
    InvalidFraction,
    DuplicateDocId,
    EmptyTrainingStream,
    UnknownId,
    InvalidOrder,
    InvalidConfig,
    NonFiniteActivation,
    DivergedTraining,
    NoEligibleSentences,
    BadFormat,
    VocabHashMismatch,
    UnsupportedVersion,
    Io,
};

inline std::string_view to_string(ErrorCode code)
{
    switch (code) {
    case ErrorCode::EmptyDocument: return "EmptyDocument";
    case ErrorCode::MalformedMarkup: return "MalformedMarkup";
    case ErrorCode::InvalidFraction: return "InvalidFraction";
    case ErrorCode::DuplicateDocId: return "DuplicateDocId";
    case ErrorCode::EmptyTrainingStream: return "EmptyTrainingStream";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::InvalidOrder: return "InvalidOrder";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::DivergedTraining: return "DivergedTraining";
    case ErrorCode::NoEligibleSentences: return "NoEligibleSentences";
    case ErrorCode::BadFormat: return "BadFormat";
    case ErrorCode::VocabHashMismatch: return "VocabHashMismatch";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (CLI, HTTP layer) can map it without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code)
    {
    }

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace akr
