#pragma once

#include <stdexcept>
#include <string>

namespace exptree {

/// Raised for invalid input, malformed models, and numeric failures.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace exptree
