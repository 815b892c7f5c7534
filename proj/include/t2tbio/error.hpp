#pragma once

#include <stdexcept>
#include <string>

namespace t2tbio {

enum class ErrorKind {
    usage,    // bad flags or arguments
    data,     // malformed input files or records
    config,   // invalid configuration values
    numeric,  // non-finite values during computation
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace t2tbio
