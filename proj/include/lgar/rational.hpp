#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>

namespace lgar {

/// Exact rational used for LLM scores and all metric arithmetic.
using Rational = boost::multiprecision::cpp_rational;

inline Rational make_rational(std::int64_t num, std::int64_t den = 1) {
  if (den == 0) throw std::invalid_argument("rational with zero denominator");
  return Rational(num, den);
}

inline double to_double(const Rational& r) { return r.convert_to<double>(); }

/// Fixed-point decimal rendering, e.g. 1/3 -> "0.333333" for digits = 6.
inline std::string to_decimal(const Rational& r, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, to_double(r));
  return buf;
}

/// "p/q" (or "p" for integers); round-trips through parse_rational.
inline std::string to_fraction(const Rational& r) {
  using boost::multiprecision::denominator;
  using boost::multiprecision::numerator;
  if (denominator(r) == 1) return numerator(r).str();
  return numerator(r).str() + "/" + denominator(r).str();
}

inline Rational parse_rational(const std::string& text) {
  try {
    auto slash = text.find('/');
    if (slash == std::string::npos) return Rational(boost::multiprecision::cpp_int(text));
    return Rational(boost::multiprecision::cpp_int(text.substr(0, slash)),
                    boost::multiprecision::cpp_int(text.substr(slash + 1)));
  } catch (const std::exception&) {
    throw std::invalid_argument("not a rational: '" + text + "'");
  }
}

inline Rational mean(std::span<const Rational> values) {
  if (values.empty()) throw std::invalid_argument("mean of empty sequence");
  Rational sum = 0;
  for (const auto& v : values) sum += v;
  return sum / static_cast<std::int64_t>(values.size());
}

}  // namespace lgar
