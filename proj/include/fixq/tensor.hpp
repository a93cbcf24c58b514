#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fixq/common.hpp"

namespace fixq {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw validation_error("negative dimension in shape " + shape_str(s));
    if (__builtin_mul_overflow(n, d, &n))
      throw validation_error("element count overflow in shape " + shape_str(s));
  }
  return n;
}

// Dense tensor, row-major with the last dimension fastest. Activations are
// (N,C,H,W) or (N,F); conv weights (out,in,kh,kw); fc weights (out,in);
// biases (out). Value-semantic: operations allocate fresh outputs and never
// mutate their inputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, real fill = 0)
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

  static Tensor from(Shape shape, std::vector<real> values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
      throw validation_error("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  std::vector<real>& values() { return data_; }
  const std::vector<real>& values() const { return data_; }

  real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // rank-4 (N,C,H,W) accessor
  real& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  real at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  // rank-2 (rows,cols) accessor
  real& at(std::int64_t i, std::int64_t j) {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  real at(std::int64_t i, std::int64_t j) const {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<real> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!same_shape(a, b))
    throw validation_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
}

inline void check_finite(const Tensor& t, const char* what) {
  for (std::int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t[i]))
      throw numeric_error(std::string(what) + ": non-finite element at flat index " +
                          std::to_string(i));
}

// Copy with a new shape of equal element count.
inline Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.size())
    throw validation_error("reshape: cannot view " + shape_str(t.shape()) + " as " +
                           shape_str(shape));
  return Tensor::from(std::move(shape), t.values());
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Tensor scale(const Tensor& t, real s) {
  Tensor out(t.shape());
  for (std::int64_t i = 0; i < t.size(); ++i) out[i] = t[i] * s;
  return out;
}

inline real max_abs(const Tensor& t) {
  real m = 0;
  for (std::int64_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(t[i]));
  return m;
}

inline Tensor relu(const Tensor& t) {
  Tensor out(t.shape());
  // v > 0 ? v : 0 rather than max() so -0.0 normalizes to +0.0
  for (std::int64_t i = 0; i < t.size(); ++i) out[i] = t[i] > 0 ? t[i] : real(0);
  return out;
}

// a (m,k) * b (k,n) -> (m,n); inner products accumulate in ascending k.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw validation_error("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      real acc = 0;
      for (std::int64_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      out.at(i, j) = acc;
    }
  return out;
}

struct SparsityStat {
  std::int64_t zero_count = 0;
  std::int64_t total_count = 0;
  real sparsity = 0;
};

// Fraction of elements with |v| <= tolerance. Quantized zeros are exact, so
// the default tolerance is 0.
inline SparsityStat sparsity(const Tensor& t, real tolerance = 0) {
  if (t.empty()) throw validation_error("sparsity: empty tensor");
  if (tolerance < 0) throw validation_error("sparsity: negative tolerance");
  SparsityStat s;
  s.total_count = t.size();
  for (std::int64_t i = 0; i < t.size(); ++i)
    if (std::abs(t[i]) <= tolerance) ++s.zero_count;
  s.sparsity = static_cast<real>(s.zero_count) / static_cast<real>(s.total_count);
  return s;
}

// Patch extraction for sample n of x (N,C,H,W): output (C*k*k, oh*ow) with
// row index (c*k + ky)*k + kx. Out-of-bounds taps are zero-filled. The row
// ordering fixes the accumulation order of the matmul-based convolution.
inline Tensor im2col(const Tensor& x, std::int64_t n, std::int64_t k, std::int64_t stride,
                     std::int64_t pad) {
  if (x.rank() != 4) throw validation_error("im2col: expected rank-4 input, got " + shape_str(x.shape()));
  const std::int64_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = (h + 2 * pad - k) / stride + 1;
  const std::int64_t ow = (w + 2 * pad - k) / stride + 1;
  if (oh < 1 || ow < 1)
    throw validation_error("im2col: kernel " + std::to_string(k) + " does not fit input " +
                           shape_str(x.shape()) + " with pad " + std::to_string(pad));
  Tensor col({c * k * k, oh * ow});
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t ky = 0; ky < k; ++ky)
      for (std::int64_t kx = 0; kx < k; ++kx) {
        const std::int64_t row = (ci * k + ky) * k + kx;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride + ky - pad;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride + kx - pad;
            const bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
            col.at(row, oy * ow + ox) = inside ? x.at(n, ci, iy, ix) : real(0);
          }
        }
      }
  return col;
}

}  // namespace fixq
