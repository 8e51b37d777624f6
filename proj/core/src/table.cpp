#include "attnbias/table.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <system_error>

namespace attnbias {

IoError::IoError(const std::filesystem::path& path, const std::string& what)
    : std::runtime_error(path.string() + ": " + what), path_(path) {}

void Table::add_row(std::vector<Cell> row) {
  if (row.size() != header.size()) throw std::invalid_argument("Table " + name + ": row width differs from header");
  rows.push_back(std::move(row));
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

namespace {

std::string cell_text(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return csv_field(*s);
  if (const auto* i = std::get_if<long long>(&c)) return std::to_string(*i);
  return format_double(std::get<double>(c));
}

}  // namespace

std::string to_csv(const Table& table) {
  if (table.header.empty()) throw std::invalid_argument("to_csv: table " + table.name + " has no columns");
  std::string out;
  for (std::size_t i = 0; i < table.header.size(); ++i) {
    if (i) out += ',';
    out += csv_field(table.header[i]);
  }
  out += '\n';
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) throw std::invalid_argument("to_csv: ragged row in " + table.name);
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += cell_text(row[i]);
    }
    out += '\n';
  }
  return out;
}

std::string to_json_text(const nlohmann::json& doc) { return doc.dump(2) + "\n"; }

void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp, "cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError(tmp, "write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError(path, "rename failed");
  }
}

std::vector<std::string> emit_results(const std::vector<Table>& tables, const std::filesystem::path& dir) {
  if (tables.empty()) throw std::invalid_argument("emit_results: no tables");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir, "cannot create directory: " + ec.message());
  std::vector<std::string> files;
  for (const Table& t : tables) {
    if (t.rows.empty()) throw std::invalid_argument("emit_results: table " + t.name + " is empty");
    const std::string file = t.name + ".csv";
    write_atomic(dir / file, to_csv(t));
    files.push_back(file);
  }
  return files;
}

}  // namespace attnbias
