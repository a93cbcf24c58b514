#pragma once

#include <stdexcept>
#include <string>

namespace fixq {

// Scalar type for tensor storage and all full-precision arithmetic. Every
// Qm.f grid supported by the file formats (total_bits <= 24 in f32 blobs)
// embeds exactly in this type.
using real = double;

// Malformed inputs: bad config text, shape mismatches, out-of-range codes,
// inconsistent files. Mapped to CLI exit code 2.
class validation_error : public std::runtime_error {
 public:
  explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failures: non-finite tensor data, diverging training runs.
// Mapped to CLI exit code 3.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fixq
