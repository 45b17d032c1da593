#ifndef LCD_ERROR_HPP
#define LCD_ERROR_HPP

#include <stdexcept>
#include <string>

namespace lcd {

// Base of every exception thrown by the library. Rejected loops and failed
// RANSAC consensus are values, not errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad caller input: wrong dimensions, invalid parameters, empty clouds.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

// File contents do not follow the expected format.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Geometry that does not determine a rigid transform (collinear points...).
class DegenerateGeometry : public Error {
 public:
  using Error::Error;
};

// Overflow/underflow or other loss of finiteness inside a numerical kernel.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace lcd

#endif  // LCD_ERROR_HPP
