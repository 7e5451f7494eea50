#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace opcomm::textio {

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);

/// Fixed-point formatting with `digits` decimals.
std::string format_fixed(double v, int digits);

/// Parses a full-string decimal; throws FormatError naming `what` otherwise.
double parse_double(std::string_view text, std::string_view what);
std::int64_t parse_int(std::string_view text, std::string_view what);

std::vector<std::string> split(std::string_view line, char sep);

/// A CSV document: leading `#` comment lines, a header row, then data rows.
struct CsvTable {
  std::vector<std::string> comments;  // without the leading "# "
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws FormatError if absent.
  std::size_t column(std::string_view name) const;
};

CsvTable parse_csv(std::string_view text);
std::string write_csv(const CsvTable& table);

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace opcomm::textio
