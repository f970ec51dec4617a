#pragma once

// Small text-format helpers shared by the file formats.

#include <cstddef>
#include <filesystem>
#include <istream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace smear {

/// Malformed input; the message carries the file and line number.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exact hexadecimal rendering of a double (printf "%a").
std::string format_hex(double v);
/// Shortest decimal that round-trips (printf "%.17g").
std::string format_exact(double v);
/// Parses decimal or hexadecimal floats; throws ParseError on trailing junk.
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::vector<std::string> split(std::string_view line, char sep);

/// Line reader that keeps track of the current line number for diagnostics.
class LineReader {
 public:
  LineReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}
  /// Next line, or false at end of input.
  bool next(std::string& line);
  /// Next line split on whitespace; throws at end of input.
  std::vector<std::string> expect_fields(std::size_t min_count);
  [[noreturn]] void fail(const std::string& message) const;
  std::size_t line_number() const { return line_no_; }

 private:
  std::istream& in_;
  std::string source_;
  std::size_t line_no_ = 0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace smear
