#ifndef MITL_ERRORS_HPP
#define MITL_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace mitl {

enum class ErrorCode {
    MissingFile,
    IoError,
    SchemaViolation,
    CountMismatch,
    PointOutOfBounds,
    InvalidSpec,
    NonSquareInput,
    SingularMatrix,
    InvalidConfig,
    ShapeMismatch,
    VersionMismatch,
    CorruptFile,
    TooFewDomains,
    MissingDomain,
    SingleClassTraining,
    EmptyClass,
    EmptyEnsemble,
    MixedSampleIds,
    UndefinedClassRate,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& detail)
        : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

} // namespace mitl

#endif
