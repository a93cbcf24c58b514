#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "fixq/common.hpp"
#include "fixq/rng.hpp"
#include "fixq/tensor.hpp"

namespace fixq {

enum class RoundingScheme { kDeterministic, kStochastic };

inline std::string to_string(RoundingScheme s) {
  return s == RoundingScheme::kDeterministic ? "DETERMINISTIC" : "STOCHASTIC";
}

// Accepts long and short spellings, case-insensitive, plus the historical
// "STOACHASTIC" misspelling found in older configs. Always emitted as
// "STOCHASTIC"/"DETERMINISTIC".
inline RoundingScheme parse_rounding_scheme(std::string_view text) {
  std::string t;
  for (char c : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (t == "deterministic" || t == "det") return RoundingScheme::kDeterministic;
  if (t == "stochastic" || t == "stoch" || t == "stoachastic") return RoundingScheme::kStochastic;
  throw validation_error("unknown rounding scheme '" + std::string(text) + "'");
}

// A Qbd.ad two's-complement grid. bd counts integer bits including the sign
// bit for signed formats; ad counts fractional bits. Representable values
// are exactly k * 2^-ad for integer codes k in [min_code, max_code].
class FixedPointFormat {
 public:
  FixedPointFormat() = default;  // Q2.14 signed

  FixedPointFormat(int bd, int ad, bool is_signed = true) : bd_(bd), ad_(ad), signed_(is_signed) {
    const int total = bd + ad;
    if (ad < 0 || bd < 0 || total < 1 || total > 32)
      throw validation_error("invalid fixed-point format Q" + std::to_string(bd) + "." +
                             std::to_string(ad) + ": total bits must be in [1,32]");
    if (is_signed && bd < 1)
      throw validation_error("signed format Q" + std::to_string(bd) + "." + std::to_string(ad) +
                             " needs bd >= 1 for the sign bit");
  }

  // "Q<bd>.<ad>" with optional trailing 'u' for unsigned, e.g. "Q2.14", "Q8.8u".
  static FixedPointFormat parse(std::string_view text) {
    const auto fail = [&] {
      throw validation_error("malformed fixed-point format '" + std::string(text) +
                             "' (expected Q<bd>.<ad>[u])");
    };
    std::size_t i = 0;
    if (text.empty() || (text[0] != 'Q' && text[0] != 'q')) fail();
    ++i;
    const auto read_int = [&]() -> int {
      if (i >= text.size() || !std::isdigit(static_cast<unsigned char>(text[i]))) fail();
      long v = 0;
      while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) {
        v = v * 10 + (text[i] - '0');
        if (v > 64) fail();
        ++i;
      }
      return static_cast<int>(v);
    };
    const int bd = read_int();
    if (i >= text.size() || text[i] != '.') fail();
    ++i;
    const int ad = read_int();
    bool is_signed = true;
    if (i < text.size() && (text[i] == 'u' || text[i] == 'U')) {
      is_signed = false;
      ++i;
    }
    if (i != text.size()) fail();
    return FixedPointFormat(bd, ad, is_signed);
  }

  std::string str() const {
    return "Q" + std::to_string(bd_) + "." + std::to_string(ad_) + (signed_ ? "" : "u");
  }

  int bd() const { return bd_; }
  int ad() const { return ad_; }
  int total_bits() const { return bd_ + ad_; }
  bool is_signed() const { return signed_; }

  real step() const { return std::ldexp(real(1), -ad_); }
  std::int64_t min_code() const {
    return signed_ ? -(std::int64_t(1) << (total_bits() - 1)) : 0;
  }
  std::int64_t max_code() const {
    return signed_ ? (std::int64_t(1) << (total_bits() - 1)) - 1
                   : (std::int64_t(1) << total_bits()) - 1;
  }
  real min_value() const { return std::ldexp(static_cast<real>(min_code()), -ad_); }
  real max_value() const { return std::ldexp(static_cast<real>(max_code()), -ad_); }

  bool on_grid(real x) const {
    if (!std::isfinite(x)) return false;
    const real scaled = std::ldexp(x, ad_);
    return scaled == std::floor(scaled) && scaled >= static_cast<real>(min_code()) &&
           scaled <= static_cast<real>(max_code());
  }

  bool operator==(const FixedPointFormat&) const = default;

 private:
  int bd_ = 2;
  int ad_ = 14;
  bool signed_ = true;
};

namespace detail {
inline void check_quant_input(real x, const char* op) {
  if (!std::isfinite(x))
    throw numeric_error(std::string(op) + ": non-finite value (corrupt tensor data)");
}
}  // namespace detail

// Nearest grid value, ties rounded half away from zero; out-of-range values
// saturate to the nearer bound.
inline real quantize_det(real x, const FixedPointFormat& fmt) {
  detail::check_quant_input(x, "quantize_det");
  if (x >= fmt.max_value()) return fmt.max_value();
  if (x <= fmt.min_value()) return fmt.min_value();
  // x is strictly inside the range, so the scaled value rounds to a code in
  // [min_code, max_code] and llround cannot overflow.
  const real scaled = std::ldexp(x, fmt.ad());
  return std::ldexp(static_cast<real>(std::llround(scaled)), -fmt.ad());
}

namespace detail {
// Shared stochastic kernel: u is a uniform draw in [0,1). In-range values
// round to the lower neighbor L with probability (L+step-x)/step, giving
// E[result] == x; out-of-range values saturate deterministically so no
// probability mass lands beyond the bounds.
inline real quantize_stoch_u(real x, const FixedPointFormat& fmt, double u) {
  check_quant_input(x, "quantize_stoch");
  if (x >= fmt.max_value()) return fmt.max_value();
  if (x <= fmt.min_value()) return fmt.min_value();
  const real scaled = std::ldexp(x, fmt.ad());
  const real lower = std::floor(scaled);
  const real frac = scaled - lower;
  std::int64_t code = static_cast<std::int64_t>(lower);
  if (frac > 0 && static_cast<real>(u) < frac) ++code;
  return std::ldexp(static_cast<real>(code), -fmt.ad());
}
}  // namespace detail

inline real quantize_stoch(real x, const FixedPointFormat& fmt, rng::Counter& rng) {
  return detail::quantize_stoch_u(x, fmt, rng.uniform());
}

// Order-independent form: the draw is keyed by (seed, index), so tensors can
// be quantized element-parallel with reproducible results.
inline real quantize_stoch_at(real x, const FixedPointFormat& fmt, std::uint64_t seed,
                              std::uint64_t index) {
  return detail::quantize_stoch_u(x, fmt, rng::uniform_at(seed, index));
}

// Exact code of an on-grid value. Off-grid or out-of-range input is an error;
// this function never rounds.
inline std::int64_t to_code(real x, const FixedPointFormat& fmt) {
  detail::check_quant_input(x, "to_code");
  const real scaled = std::ldexp(x, fmt.ad());
  if (scaled != std::floor(scaled))
    throw validation_error("to_code: value is not on the " + fmt.str() + " grid");
  if (scaled < static_cast<real>(fmt.min_code()) || scaled > static_cast<real>(fmt.max_code()))
    throw validation_error("to_code: value exceeds the " + fmt.str() + " code range");
  return static_cast<std::int64_t>(scaled);
}

inline real from_code(std::int64_t code, const FixedPointFormat& fmt) {
  if (code < fmt.min_code() || code > fmt.max_code())
    throw validation_error("from_code: code " + std::to_string(code) + " out of range for " +
                           fmt.str());
  return std::ldexp(static_cast<real>(code), -fmt.ad());
}

// Elementwise quantization. Stochastic draws are keyed by (seed, flat element
// index): the result is a pure function of (t, fmt, scheme, seed).
inline Tensor quantize_tensor(const Tensor& t, const FixedPointFormat& fmt, RoundingScheme scheme,
                              std::uint64_t seed = 0) {
  Tensor out(t.shape());
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const real v = t[i];
    if (!std::isfinite(v))
      throw numeric_error("quantize_tensor: non-finite element at flat index " +
                          std::to_string(i));
    out[i] = scheme == RoundingScheme::kDeterministic
                 ? quantize_det(v, fmt)
                 : quantize_stoch_at(v, fmt, seed, static_cast<std::uint64_t>(i));
  }
  return out;
}

}  // namespace fixq
