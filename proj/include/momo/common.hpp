#pragma once

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>

namespace momo {

// All recoverable failures (shape mismatches, bad config, bad indices)
// surface as momo::Error; the CLI maps them to exit codes.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline void raise(const std::string& msg) { throw Error(msg); }
}  // namespace detail

#define MOMO_CHECK(cond, msg)                                        \
    do {                                                             \
        if (!(cond)) {                                               \
            std::ostringstream oss__;                                \
            oss__ << msg;                                            \
            ::momo::detail::raise(oss__.str());                      \
        }                                                            \
    } while (0)

inline bool is_finite(float v) { return std::isfinite(v); }
inline bool is_finite(double v) { return std::isfinite(v); }

}  // namespace momo
