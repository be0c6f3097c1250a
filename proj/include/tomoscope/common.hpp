#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace tomo {

struct ParseError : std::runtime_error {
    int line;
    ParseError(int line_, const std::string& what_)
        : std::runtime_error("line " + std::to_string(line_) + ": " + what_), line(line_) {}
};

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EstimationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised by the bracketed polynomial solver when no root lies in (gamma_parent, 1].
struct IdentifiabilityError : EstimationError {
    enum class Reason { degenerate_counts, root_above_one, degenerate_node };
    Reason reason;
    double gamma_parent;
    std::vector<double> child_gammas;
    IdentifiabilityError(Reason r, double gp, std::vector<double> gs, const std::string& what_)
        : EstimationError(what_), reason(r), gamma_parent(gp), child_gammas(std::move(gs)) {}
};

// Per-link diagnostic flags, serialized as a comma-free token list.
enum LinkFlag : unsigned {
    flag_none = 0,
    flag_overlap_violation = 1u << 0,
    flag_boundary = 1u << 1,
    flag_nonconverged = 1u << 2,
    flag_unidentifiable_below = 1u << 3,
    flag_compound = 1u << 4,
};

inline std::string flags_to_string(unsigned f) {
    std::string out;
    auto add = [&](const char* tok) {
        if (!out.empty()) out += ' ';
        out += tok;
    };
    if (f & flag_overlap_violation) add("overlap_violation");
    if (f & flag_boundary) add("boundary");
    if (f & flag_nonconverged) add("nonconverged");
    if (f & flag_unidentifiable_below) add("unidentifiable_below");
    if (f & flag_compound) add("compound");
    if (out.empty()) out = "-";
    return out;
}

// 12 significant digits, the serialization width used by every CSV writer.
inline std::string format_decimal(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace tomo
