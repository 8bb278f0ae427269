#pragma once

// Plain-text artifacts. CSV: a "# config_hash=..., tool_version=..." header
// line, then a column row, then data rows; '.' decimals, no grouping, LF line
// endings. Numbers are formatted with the C locale so output is bit-stable.

#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mirage/core/error.hpp"

namespace mirage::io {

// Fixed two-decimal rendering for percentages and ratios; NaN prints as "NA".
inline std::string fixed2(double v) {
  if (std::isnan(v)) return "NA";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 2);
  return std::string(buf, r.ptr);
}

// Shortest round-trip rendering.
inline std::string shortest(double v) {
  if (std::isnan(v)) return "NA";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string optional2(const std::optional<double>& v) { return v ? fixed2(*v) : "NA"; }

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  const std::vector<std::string>& columns() const { return columns_; }
  std::size_t rows() const { return rows_.size(); }

  void add(std::vector<std::string> row) {
    if (row.size() != columns_.size())
      throw ContractError("csv: row has " + std::to_string(row.size()) + " cells, table has " +
                          std::to_string(columns_.size()) + " columns");
    for (const auto& c : row)
      if (c.find_first_of(",\n\"") != std::string::npos) throw ContractError("csv: cell '" + c + "' needs quoting");
    rows_.push_back(std::move(row));
  }

  std::string render(const std::string& config_hash, const std::string& tool_version) const {
    std::string out = "# config_hash=" + config_hash + ", tool_version=" + tool_version + "\n";
    auto line = [&](const std::vector<std::string>& v) {
      for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
      out += "\n";
    };
    line(columns_);
    for (const auto& r : rows_) line(r);
    return out;
  }

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw IoError("write to '" + path + "' failed");
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Header fields of a CSV written by CsvTable.
struct CsvHeader {
  std::string config_hash;
  std::string tool_version;
};

inline CsvHeader parse_csv_header(const std::string& text) {
  const auto nl = text.find('\n');
  const std::string first = text.substr(0, nl);
  const std::string a = "# config_hash=", b = ", tool_version=";
  const auto pb = first.find(b);
  if (first.rfind(a, 0) != 0 || pb == std::string::npos) throw FormatError("csv: missing config header line", 0);
  return {first.substr(a.size(), pb - a.size()), first.substr(pb + b.size())};
}

}  // namespace mirage::io
