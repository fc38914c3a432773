// SPDX-License-Identifier: Apache-2.0
#include "tabrep/csv.hpp"

#include <fstream>
#include <sstream>

#include "tabrep/errors.hpp"

namespace tabrep {

namespace {

// Splits CSV text into records of fields. Handles quoted fields with ""
// escapes and embedded newlines; accepts both LF and CRLF line endings.
std::vector<std::vector<std::string>> split_records(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> fields;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;

  auto end_field = [&] {
    fields.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(fields));
    fields.clear();
  };

  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < n && text[i + 1] == '"') {
          field.push_back('"');
          i += 2;
        } else {
          in_quotes = false;
          ++i;
        }
      } else {
        field.push_back(c);
        ++i;
      }
    } else if (c == '"' && !field_started) {
      in_quotes = true;
      field_started = true;
      ++i;
    } else if (c == ',') {
      end_field();
      ++i;
    } else if (c == '\r' && i + 1 < n && text[i + 1] == '\n') {
      end_record();
      i += 2;
    } else if (c == '\n') {
      end_record();
      ++i;
    } else {
      field.push_back(c);
      field_started = true;
      ++i;
    }
  }
  if (in_quotes) throw DataError("csv: unterminated quoted field");
  // Final record without trailing newline.
  if (field_started || !field.empty() || !fields.empty()) end_record();
  return records;
}

}  // namespace

RawTable parse_csv(std::string_view text, std::string table_id) {
  auto records = split_records(text);
  if (records.empty()) throw DataError("csv: no header row in table '" + table_id + "'");

  RawTable table;
  table.table_id = std::move(table_id);
  table.column_names = std::move(records.front());
  const std::size_t n_cols = table.column_names.size();
  if (n_cols == 0 || (n_cols == 1 && table.column_names[0].empty()))
    throw DataError("csv: table '" + table.table_id + "' has zero columns");

  table.rows.reserve(records.size() - 1);
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != n_cols) {
      throw DataError("csv: table '" + table.table_id + "' row " + std::to_string(r) + " has " +
                      std::to_string(records[r].size()) + " fields, expected " +
                      std::to_string(n_cols));
    }
    table.rows.push_back(std::move(records[r]));
  }
  return table;
}

RawTable read_csv(const std::filesystem::path& path, std::string table_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open csv file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), std::move(table_id));
}

std::string csv_escape(std::string_view field) {
  const bool needs_quotes = field.find_first_of(",\"\r\n") != std::string_view::npos;
  if (!needs_quotes) return std::string(field);
  std::string out;
  out.reserve(field.size() + 2);
  out.push_back('"');
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

void write_csv(const RawTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write csv file: " + path.string());
  for (std::size_t c = 0; c < table.column_names.size(); ++c) {
    if (c) out << ',';
    out << csv_escape(table.column_names[c]);
  }
  out << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << ',';
      out << csv_escape(row[c]);
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace tabrep
