#pragma once

#include <stdexcept>
#include <string>

namespace gradtrace {

enum class Errc {
    dimension,
    numeric,
    state,
    length,
    provenance,
    size,
    zero_eval_gradient,
    diverged_run,
    corruption,
    version,
    config,
    io,
};

inline const char* errc_name(Errc c) {
    switch (c) {
        case Errc::dimension: return "dimension";
        case Errc::numeric: return "numeric";
        case Errc::state: return "state";
        case Errc::length: return "length";
        case Errc::provenance: return "provenance";
        case Errc::size: return "size";
        case Errc::zero_eval_gradient: return "zero-eval-gradient";
        case Errc::diverged_run: return "diverged-run";
        case Errc::corruption: return "corruption";
        case Errc::version: return "version";
        case Errc::config: return "config";
        case Errc::io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& msg)
        : std::runtime_error(std::string(errc_name(code)) + " error: " + msg), code_(code) {}

    Errc code() const { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) {
    throw Error(code, msg);
}

} // namespace gradtrace
