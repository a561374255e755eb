#pragma once

#include <stdexcept>
#include <string>

namespace rlar {

// Bad input: malformed files, shape mismatches, out-of-range labels, bad config.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values, failed gradient checks.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace rlar
