#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace attnbias {

class IoError : public std::runtime_error {
 public:
  IoError(const std::filesystem::path& path, const std::string& what);

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

using Cell = std::variant<std::string, long long, double>;

struct Table {
  std::string name;  // file stem
  std::vector<std::string> header;
  std::vector<std::vector<Cell>> rows;

  void add_row(std::vector<Cell> row);
};

/// Shortest form that round-trips exactly.
std::string format_double(double v);

/// RFC 4180 quoting when the field holds a comma, quote or line break.
std::string csv_field(const std::string& s);

/// Header plus rows, LF line endings. Throws std::invalid_argument on an
/// empty header or a ragged row.
std::string to_csv(const Table& table);

/// Pretty-printed, keys sorted, trailing newline.
std::string to_json_text(const nlohmann::json& doc);

/// Writes `path.tmp` then renames over `path`.
void write_atomic(const std::filesystem::path& path, const std::string& bytes);

/// One CSV per table under `dir`; returns the file names written.
std::vector<std::string> emit_results(const std::vector<Table>& tables, const std::filesystem::path& dir);

}  // namespace attnbias
