#pragma once

#include <stdexcept>
#include <string>

namespace sabone {

/// Base class for all library errors. `kind()` lets callers (CLI, HTTP
/// service) map failures onto exit codes / status codes without string
/// matching.
class Error : public std::runtime_error {
public:
    enum class Kind {
        Io,          ///< file missing, unreadable or unwritable
        Format,      ///< malformed archive, manifest or checkpoint
        Shape,       ///< tensor/grid shape mismatch
        Range,       ///< index or coordinate out of range
        Invalid,     ///< argument violates a precondition
        Divergence,  ///< training produced a non-finite loss
        Contract,    ///< frozen-parameter contract violated
    };

    Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline Error io_error(const std::string& m) { return {Error::Kind::Io, m}; }
inline Error format_error(const std::string& m) { return {Error::Kind::Format, m}; }
inline Error shape_error(const std::string& m) { return {Error::Kind::Shape, m}; }
inline Error range_error(const std::string& m) { return {Error::Kind::Range, m}; }
inline Error invalid_argument(const std::string& m) { return {Error::Kind::Invalid, m}; }

}  // namespace sabone
