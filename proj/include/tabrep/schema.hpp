// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tabrep/csv.hpp"

namespace tabrep {

enum class ColumnKind { Numerical, Categorical };

enum class TaskKind { BinaryClassification, MulticlassClassification, Regression, None };

std::string_view to_string(ColumnKind kind);
std::string_view to_string(TaskKind task);
ColumnKind column_kind_from_string(std::string_view s);
TaskKind task_kind_from_string(std::string_view s);

/// Which cell contents count as missing. Empty fields and the literal "nan"
/// (case-insensitive) are always missing; callers may add extra sentinels.
struct MissingPolicy {
  std::vector<std::string> extra_sentinels;

  bool is_missing(std::string_view value) const;
};

/// Attempt to parse a cell as a finite decimal number. Leading/trailing
/// whitespace is accepted; anything else unparsed fails.
std::optional<double> parse_finite(std::string_view value);

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::Numerical;
  std::size_t raw_unique_count = 0;  // distinct non-missing raw values
  bool has_missing = false;
};

struct TableSchema {
  std::string table_id;
  std::vector<ColumnSpec> columns;
  std::size_t row_count = 0;
};

struct SchemaOptions {
  // Numeric columns with fewer distinct values than this are categorical.
  int categorical_threshold = 20;
  MissingPolicy missing;
};

/// Classify each column as numerical or categorical and count uniques.
/// A column is numeric when every non-missing value parses as a finite number;
/// numeric columns below the unique-count threshold are demoted to categorical.
TableSchema infer_schema(const RawTable& table, const SchemaOptions& options = {});

/// Stable serialization of a schema (byte-for-byte reproducible).
std::string schema_to_string(const TableSchema& schema);

struct ValidationOptions {
  bool drop_high_cardinality_cats = true;
  bool enforce_min_rows = true;
  bool enforce_column_range = true;
  std::size_t max_categorical_unique = 64;
  std::size_t min_rows = 1000;  // pass requires strictly more rows than this
  std::size_t min_columns = 10;
  std::size_t max_columns = 50;
};

/// Report-only corpus curation: which columns survive, which are dropped,
/// and whether the table passes the row/column filters.
struct ValidationReport {
  std::vector<ColumnSpec> kept;
  std::vector<ColumnSpec> dropped;
  bool pass = true;
  std::vector<std::string> failures;
};

ValidationReport validate_for_corpus(const TableSchema& schema,
                                     const ValidationOptions& options = {});

struct SplitSpec {
  double pretrain_fraction = 0.6;
  std::uint64_t seed = 0;
};

/// Disjoint, exhaustive row partition. Indices are kept in shuffled order;
/// tokenizer fitting uses the leading pretrain indices as its sample.
struct RowSplit {
  std::vector<std::size_t> pretrain;
  std::vector<std::size_t> eval;
};

/// Seeded uniform shuffle followed by a prefix split of round(fraction * n).
RowSplit split_rows(std::size_t row_count, const SplitSpec& spec);

struct ManifestEntry {
  std::string table_id;
  std::filesystem::path path;
  TaskKind task = TaskKind::None;
  std::string target_column;  // empty when task == None
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;

  const ManifestEntry& find(std::string_view table_id) const;
};

/// Manifest text format: one [table] block per entry with key = value lines
/// (id, path, task, target). '#' starts a comment.
CorpusManifest parse_manifest(std::string_view text,
                              const std::filesystem::path& base_dir = {});
CorpusManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);

}  // namespace tabrep
