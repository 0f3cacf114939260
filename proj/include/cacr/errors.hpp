#pragma once

#include <stdexcept>
#include <string>

namespace cacr {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ZeroNorm : Error {
  using Error::Error;
};
struct DimMismatch : Error {
  using Error::Error;
};
struct ShapeMismatch : Error {
  using Error::Error;
};
struct EmptyNegativeSupport : Error {
  using Error::Error;
};
struct KMismatch : Error {
  using Error::Error;
};
struct DatasetTooSmall : Error {
  using Error::Error;
};
struct CollapseDetected : Error {
  using Error::Error;
};
struct NonFiniteLoss : Error {
  using Error::Error;
};
struct LabelMismatch : Error {
  using Error::Error;
};
struct EmptyValidation : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct ConfigParse : Error {
  using Error::Error;
};
struct ChecksumMismatch : Error {
  using Error::Error;
};
struct InvalidArgument : Error {
  using Error::Error;
};

}  // namespace cacr
