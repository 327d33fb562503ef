#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pmh {

enum class ErrorKind {
    InvalidMatrix,
    DimMismatch,
    NotFactorable,
    InsufficientGrid,
    DegenerateAllocation,
    TooLargeForOracle,
    InvalidInput,
    RankTooLarge,
    PairingError,
    EmptyBlock,
    NoIncrements,
    InsufficientWidth,
    DegenerateConstruction,
    Diverged,
    DegenerateEmbedding,
    GroupTooSmall,
    DegenerateCentroids,
    InvalidSubspace,
    ZeroSignal,
    ConfigError,
    PartialReport,
    Internal,
};

inline std::string_view to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::InvalidMatrix: return "InvalidMatrix";
        case ErrorKind::DimMismatch: return "DimMismatch";
        case ErrorKind::NotFactorable: return "NotFactorable";
        case ErrorKind::InsufficientGrid: return "InsufficientGrid";
        case ErrorKind::DegenerateAllocation: return "DegenerateAllocation";
        case ErrorKind::TooLargeForOracle: return "TooLargeForOracle";
        case ErrorKind::InvalidInput: return "InvalidInput";
        case ErrorKind::RankTooLarge: return "RankTooLarge";
        case ErrorKind::PairingError: return "PairingError";
        case ErrorKind::EmptyBlock: return "EmptyBlock";
        case ErrorKind::NoIncrements: return "NoIncrements";
        case ErrorKind::InsufficientWidth: return "InsufficientWidth";
        case ErrorKind::DegenerateConstruction: return "DegenerateConstruction";
        case ErrorKind::Diverged: return "Diverged";
        case ErrorKind::DegenerateEmbedding: return "DegenerateEmbedding";
        case ErrorKind::GroupTooSmall: return "GroupTooSmall";
        case ErrorKind::DegenerateCentroids: return "DegenerateCentroids";
        case ErrorKind::InvalidSubspace: return "InvalidSubspace";
        case ErrorKind::ZeroSignal: return "ZeroSignal";
        case ErrorKind::ConfigError: return "ConfigError";
        case ErrorKind::PartialReport: return "PartialReport";
        case ErrorKind::Internal: return "Internal";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace pmh
