#pragma once

#include <stdexcept>
#include <string>

namespace psound {

/// Malformed or inconsistent input data (files, corpora, annotations).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numerical failure at runtime (NaN loss, degenerate denominators, ...).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace psound
