// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace tabrep {

/// A table as read from disk: header names plus raw string cells.
struct RawTable {
  std::string table_id;
  std::vector<std::string> column_names;
  std::vector<std::vector<std::string>> rows;

  std::size_t n_cols() const { return column_names.size(); }
  std::size_t n_rows() const { return rows.size(); }
};

/// Parse RFC-4180 CSV text (header row required, quoted fields, CRLF or LF).
/// Ragged rows raise DataError; an empty header raises DataError.
RawTable parse_csv(std::string_view text, std::string table_id);

RawTable read_csv(const std::filesystem::path& path, std::string table_id);

/// Write a table back out, quoting only fields that need it.
void write_csv(const RawTable& table, const std::filesystem::path& path);

std::string csv_escape(std::string_view field);

}  // namespace tabrep
