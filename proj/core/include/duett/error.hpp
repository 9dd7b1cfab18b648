#pragma once

#include <stdexcept>
#include <string>

namespace duett {

// Error taxonomy maps onto CLI exit codes (config -> 3, data -> 4,
// numeric divergence -> 5).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

}  // namespace duett
