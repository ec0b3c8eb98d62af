#include "mitl/errors.hpp"

namespace mitl {

const char* to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::PointOutOfBounds: return "PointOutOfBounds";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::NonSquareInput: return "NonSquareInput";
    case ErrorCode::SingularMatrix: return "SingularMatrix";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::TooFewDomains: return "TooFewDomains";
    case ErrorCode::MissingDomain: return "MissingDomain";
    case ErrorCode::SingleClassTraining: return "SingleClassTraining";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::EmptyEnsemble: return "EmptyEnsemble";
    case ErrorCode::MixedSampleIds: return "MixedSampleIds";
    case ErrorCode::UndefinedClassRate: return "UndefinedClassRate";
    }
    return "UnknownError";
}

} // namespace mitl
