// SPDX-License-Identifier: Apache-2.0
#include "tabrep/schema.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "tabrep/errors.hpp"
#include "tabrep/rng.hpp"

namespace tabrep {

namespace {

bool iequals(std::string_view a, std::string_view b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(a[i])) !=
        std::tolower(static_cast<unsigned char>(b[i])))
      return false;
  }
  return true;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

std::string_view to_string(ColumnKind kind) {
  return kind == ColumnKind::Numerical ? "numerical" : "categorical";
}

std::string_view to_string(TaskKind task) {
  switch (task) {
    case TaskKind::BinaryClassification: return "binary";
    case TaskKind::MulticlassClassification: return "multiclass";
    case TaskKind::Regression: return "regression";
    case TaskKind::None: return "none";
  }
  return "none";
}

ColumnKind column_kind_from_string(std::string_view s) {
  if (s == "numerical") return ColumnKind::Numerical;
  if (s == "categorical") return ColumnKind::Categorical;
  throw ConfigError("unknown column kind: '" + std::string(s) + "'");
}

TaskKind task_kind_from_string(std::string_view s) {
  if (s == "binary") return TaskKind::BinaryClassification;
  if (s == "multiclass") return TaskKind::MulticlassClassification;
  if (s == "regression") return TaskKind::Regression;
  if (s == "none" || s.empty()) return TaskKind::None;
  throw ConfigError("unknown task kind: '" + std::string(s) + "'");
}

bool MissingPolicy::is_missing(std::string_view value) const {
  if (value.empty()) return true;
  if (iequals(value, "nan")) return true;
  for (const auto& sentinel : extra_sentinels) {
    if (value == sentinel) return true;
  }
  return false;
}

std::optional<double> parse_finite(std::string_view value) {
  const std::string buf(value);
  const char* begin = buf.c_str();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  if (end == begin) return std::nullopt;
  while (*end != '\0' && std::isspace(static_cast<unsigned char>(*end))) ++end;
  if (*end != '\0') return std::nullopt;
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

TableSchema infer_schema(const RawTable& table, const SchemaOptions& options) {
  if (table.n_cols() == 0) throw DataError("schema: table '" + table.table_id + "' has no columns");
  if (table.n_rows() == 0) throw DataError("schema: table '" + table.table_id + "' has no rows");
  {
    std::unordered_set<std::string_view> names;
    for (const auto& name : table.column_names) {
      if (!names.insert(name).second)
        throw DataError("schema: duplicate column name '" + name + "' in table '" +
                        table.table_id + "'");
    }
  }

  TableSchema schema;
  schema.table_id = table.table_id;
  schema.row_count = table.n_rows();
  schema.columns.reserve(table.n_cols());

  for (std::size_t c = 0; c < table.n_cols(); ++c) {
    ColumnSpec spec;
    spec.name = table.column_names[c];
    std::unordered_set<std::string_view> uniques;
    bool all_numeric = true;
    for (const auto& row : table.rows) {
      const std::string& cell = row[c];
      if (options.missing.is_missing(cell)) {
        spec.has_missing = true;
        continue;
      }
      uniques.insert(cell);
      if (all_numeric && !parse_finite(cell)) all_numeric = false;
    }
    spec.raw_unique_count = uniques.size();
    const bool few_uniques =
        spec.raw_unique_count < static_cast<std::size_t>(options.categorical_threshold);
    spec.kind = (all_numeric && !few_uniques) ? ColumnKind::Numerical : ColumnKind::Categorical;
    schema.columns.push_back(std::move(spec));
  }
  return schema;
}

std::string schema_to_string(const TableSchema& schema) {
  nlohmann::ordered_json j;
  j["table_id"] = schema.table_id;
  j["row_count"] = schema.row_count;
  j["columns"] = nlohmann::ordered_json::array();
  for (const auto& col : schema.columns) {
    nlohmann::ordered_json c;
    c["name"] = col.name;
    c["kind"] = to_string(col.kind);
    c["raw_unique_count"] = col.raw_unique_count;
    c["has_missing"] = col.has_missing;
    j["columns"].push_back(std::move(c));
  }
  return j.dump(2) + "\n";
}

ValidationReport validate_for_corpus(const TableSchema& schema, const ValidationOptions& options) {
  ValidationReport report;
  for (const auto& col : schema.columns) {
    const bool drop = options.drop_high_cardinality_cats &&
                      col.kind == ColumnKind::Categorical &&
                      col.raw_unique_count > options.max_categorical_unique;
    if (drop)
      report.dropped.push_back(col);
    else
      report.kept.push_back(col);
  }
  if (options.enforce_min_rows && schema.row_count <= options.min_rows) {
    report.pass = false;
    report.failures.push_back("row count " + std::to_string(schema.row_count) +
                              " not above " + std::to_string(options.min_rows));
  }
  if (options.enforce_column_range &&
      (report.kept.size() < options.min_columns || report.kept.size() > options.max_columns)) {
    report.pass = false;
    report.failures.push_back("retained column count " + std::to_string(report.kept.size()) +
                              " outside [" + std::to_string(options.min_columns) + ", " +
                              std::to_string(options.max_columns) + "]");
  }
  return report;
}

RowSplit split_rows(std::size_t row_count, const SplitSpec& spec) {
  if (!(spec.pretrain_fraction > 0.0 && spec.pretrain_fraction < 1.0))
    throw ConfigError("split: pretrain_fraction must lie in (0, 1)");
  if (row_count < 2) throw ConfigError("split: need at least 2 rows");

  std::vector<std::size_t> order(row_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(spec.seed, /*stream=*/0x517AB1E5ULL);
  rng.shuffle(order);

  const auto n_pretrain = static_cast<std::size_t>(
      std::llround(spec.pretrain_fraction * static_cast<double>(row_count)));
  RowSplit split;
  split.pretrain.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_pretrain));
  split.eval.assign(order.begin() + static_cast<std::ptrdiff_t>(n_pretrain), order.end());
  return split;
}

const ManifestEntry& CorpusManifest::find(std::string_view table_id) const {
  for (const auto& entry : entries) {
    if (entry.table_id == table_id) return entry;
  }
  throw ConfigError("manifest: no table with id '" + std::string(table_id) + "'");
}

CorpusManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  CorpusManifest manifest;
  ManifestEntry current;
  bool in_block = false;

  auto flush = [&] {
    if (!in_block) return;
    if (current.table_id.empty()) throw ConfigError("manifest: [table] block missing 'id'");
    if (current.path.empty())
      throw ConfigError("manifest: table '" + current.table_id + "' missing 'path'");
    if (current.path.is_relative() && !base_dir.empty()) current.path = base_dir / current.path;
    manifest.entries.push_back(std::move(current));
    current = ManifestEntry{};
  };

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t eol = text.find('\n', pos);
    std::string_view line =
        text.substr(pos, eol == std::string_view::npos ? std::string_view::npos : eol - pos);
    pos = (eol == std::string_view::npos) ? text.size() + 1 : eol + 1;
    ++line_no;

    if (const auto hash = line.find('#'); hash != std::string_view::npos)
      line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;

    if (line == "[table]") {
      flush();
      in_block = true;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("manifest line " + std::to_string(line_no) + ": expected key = value");
    if (!in_block)
      throw ConfigError("manifest line " + std::to_string(line_no) +
                        ": key outside a [table] block");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (key == "id")
      current.table_id = std::string(value);
    else if (key == "path")
      current.path = std::filesystem::path(std::string(value));
    else if (key == "task")
      current.task = task_kind_from_string(value);
    else if (key == "target")
      current.target_column = std::string(value);
    else
      throw ConfigError("manifest line " + std::to_string(line_no) + ": unknown key '" +
                        std::string(key) + "'");
  }
  flush();

  std::unordered_set<std::string_view> ids;
  for (const auto& entry : manifest.entries) {
    if (!ids.insert(entry.table_id).second)
      throw ConfigError("manifest: duplicate table id '" + entry.table_id + "'");
    if (entry.task != TaskKind::None && entry.target_column.empty())
      throw ConfigError("manifest: table '" + entry.table_id + "' has a task but no target");
  }
  return manifest;
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  auto manifest = parse_manifest(buf.str(), path.parent_path());
  for (const auto& entry : manifest.entries) {
    if (!std::filesystem::exists(entry.path))
      throw IoError("manifest: file not found for table '" + entry.table_id +
                    "': " + entry.path.string());
  }
  return manifest;
}

void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  for (const auto& entry : manifest.entries) {
    out << "[table]\n";
    out << "id = " << entry.table_id << "\n";
    out << "path = " << entry.path.string() << "\n";
    out << "task = " << to_string(entry.task) << "\n";
    if (!entry.target_column.empty()) out << "target = " << entry.target_column << "\n";
    out << "\n";
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace tabrep
