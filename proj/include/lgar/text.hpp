#pragma once

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lgar::text {

/// NFC-normalizes UTF-8 text. Throws on invalid UTF-8.
inline std::string normalize_nfc(std::string_view utf8) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU NFC normalizer unavailable");
  // Validate first: fromUTF8 would silently substitute U+FFFD.
  std::int32_t i = 0;
  const auto len = static_cast<std::int32_t>(utf8.size());
  while (i < len) {
    UChar32 c;
    U8_NEXT(utf8.data(), i, len, c);
    if (c < 0) throw std::invalid_argument("invalid UTF-8 sequence");
  }
  icu::UnicodeString src = icu::UnicodeString::fromUTF8(
      icu::StringPiece(utf8.data(), static_cast<std::int32_t>(utf8.size())));
  if (nfc->isNormalized(src, status) && U_SUCCESS(status)) return std::string(utf8);
  status = U_ZERO_ERROR;
  icu::UnicodeString out = nfc->normalize(src, status);
  if (U_FAILURE(status)) throw std::runtime_error("NFC normalization failed");
  std::string result;
  out.toUTF8String(result);
  return result;
}

/// Lowercased maximal runs of Unicode alphanumeric code points.
inline std::vector<std::string> tokenize(std::string_view utf8) {
  std::vector<std::string> tokens;
  std::string current;
  std::int32_t i = 0;
  const auto len = static_cast<std::int32_t>(utf8.size());
  while (i < len) {
    UChar32 c;
    U8_NEXT(utf8.data(), i, len, c);
    if (c >= 0 && u_isalnum(c)) {
      UChar32 lower = u_tolower(c);
      char buf[U8_MAX_LENGTH];
      std::int32_t n = 0;
      UBool error = false;
      U8_APPEND(buf, n, U8_MAX_LENGTH, lower, error);
      if (!error) current.append(buf, static_cast<std::size_t>(n));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

}  // namespace lgar::text
