#pragma once

#include <charconv>
#include <cstdint>
#include <istream>
#include <string>
#include <string_view>
#include <vector>

#include "vstar/error.hpp"

namespace vstar::io {

// Exact round-trip text form of a double (hexadecimal significand).
inline std::string hex(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::hex);
  return std::string(buf, res.ptr);
}

inline double parse_hex(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::hex);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw InvalidArgument("malformed hex float '" + std::string(s) + "'");
  }
  return v;
}

// Shortest decimal form that round-trips; used for CSV and JSON-ish output.
inline std::string dec(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <class Int>
Int parse_int(std::string_view s) {
  Int v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw InvalidArgument("malformed integer '" + std::string(s) + "'");
  }
  return v;
}

// Reads "<name> <value>" and returns value; throws on mismatch.
inline std::string expect_field(std::istream& in, std::string_view name) {
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument("unexpected end of file, wanted '" + std::string(name) + "'");
  auto parts = split_ws(line);
  if (parts.size() != 2 || parts[0] != name) {
    throw InvalidArgument("expected field '" + std::string(name) + "', got '" + line + "'");
  }
  return std::string(parts[1]);
}

}  // namespace vstar::io
