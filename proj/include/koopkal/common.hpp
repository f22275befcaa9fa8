#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace koopkal {

using Shape = std::vector<int64_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite values, failed factorizations, diverging recursions.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Positive-definiteness failure; minor_index is the 1-based leading minor
// at which the factorization broke down.
class PdError : public NumericError {
public:
    PdError(const std::string& msg, int minor_index)
        : NumericError(msg), minor_index(minor_index) {}
    int minor_index;
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& msg, int64_t line)
        : std::runtime_error(msg + " (line " + std::to_string(line) + ")"), line(line) {}
    int64_t line;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

}  // namespace koopkal
