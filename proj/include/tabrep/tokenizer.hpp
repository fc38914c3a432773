// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tabrep/schema.hpp"

namespace tabrep {

/// Empirical quantile cutpoints. boundaries has exactly q-1 entries and is
/// non-decreasing; duplicate boundaries (constant or skewed columns) are
/// legal and simply leave some buckets unreachable.
struct QuantileBins {
  std::vector<double> boundaries;
  int q = 0;
};

/// Nearest-rank quantiles at levels k/q (k = 1..q-1) over the non-missing
/// values. Missing values are NaN entries. Throws DataError when every value
/// is missing: drop the column or treat it as a pure-NAN categorical instead.
QuantileBins fit_numeric(std::span<const double> values, int q);

/// Bucket index in [0, q) for finite v: the smallest i with v <= boundaries[i],
/// else q-1. Ties at a boundary go to the lower bucket. +/-inf clamp to the end
/// buckets; NaN maps to the NAN slot (local index q).
int encode_numeric(const QuantileBins& bins, double v);

/// Representative raw value for a bucket: interior buckets decode to the
/// midpoint of their boundary interval, end buckets clamp to the nearest
/// boundary.
double bucket_representative(const QuantileBins& bins, int bucket);

/// Integer encoding of raw category strings in first-occurrence order.
struct CategoryMap {
  std::vector<std::string> categories;
  std::unordered_map<std::string, int> index;

  static CategoryMap fit(std::span<const std::string> values, const MissingPolicy& missing);
  /// Local index of a category, or -1 when unseen.
  int lookup(std::string_view value) const;
};

/// Per-column encoder: quantile bins or a category map, plus the NAN slot
/// at local index local_cardinality - 1.
struct ColumnTokenizer {
  std::string name;
  ColumnKind kind = ColumnKind::Numerical;
  QuantileBins bins;   // kind == Numerical
  CategoryMap cats;    // kind == Categorical
  int local_cardinality = 0;

  int nan_slot() const { return local_cardinality - 1; }

  /// Raw cell -> local index. Missing and unseen categories map to the NAN
  /// slot; a non-missing unparseable value in a numerical column is an error.
  int encode(std::string_view raw, const MissingPolicy& missing) const;

  /// Local index -> raw cell text ("" for the NAN slot).
  std::string decode(int local_index) const;
};

struct TableTokenizer {
  std::string table_id;
  std::vector<ColumnTokenizer> columns;
  std::size_t fit_sample_size = 0;
  std::size_t source_row_count = 0;
  SplitSpec split;
  MissingPolicy missing;

  int column_index(std::string_view name) const;  // -1 when absent
};

inline constexpr std::size_t kTokenizerFitCap = 10'000;

/// Fit one ColumnTokenizer per schema column using the given sample rows
/// (callers pass the leading pretrain rows; the fit uses at most
/// kTokenizerFitCap of them).
TableTokenizer fit_table_tokenizer(const RawTable& table,
                                   const std::vector<ColumnSpec>& columns,
                                   const std::vector<std::size_t>& sample_rows, int quantiles,
                                   const SplitSpec& split, const MissingPolicy& missing = {});

/// A column's contiguous global-id slice [offset, offset + cardinality).
struct ColumnRange {
  std::int64_t offset = 0;
  int cardinality = 0;
};

/// A column's contiguous slice of the target space (global id minus 2).
struct SubspaceRange {
  std::int64_t start = 0;
  int length = 0;
};

/// Direct product of all columns' token sets across all tables, plus the
/// shared PAD/MASK ids. Value ids tile [2, total_size) disjointly; ids are
/// never shared across columns or tables.
struct UnionVocabulary {
  static constexpr std::int64_t kPadId = 0;
  static constexpr std::int64_t kMaskId = 1;

  struct TableRanges {
    std::string table_id;
    std::vector<std::string> column_names;
    std::vector<ColumnRange> columns;
  };

  std::vector<TableRanges> tables;
  std::int64_t total_size = 2;

  std::int64_t target_size() const { return total_size - 2; }
  int table_index(std::string_view table_id) const;  // -1 when absent
  const TableRanges& find(std::string_view table_id) const;
  SubspaceRange subspace(const ColumnRange& range) const {
    return {range.offset - 2, range.cardinality};
  }
};

UnionVocabulary build_union_vocab(const std::vector<TableTokenizer>& tokenizers);

/// Append a new table's ranges after all existing ones. Existing offsets are
/// untouched so a backbone checkpoint built on the old vocabulary stays valid.
UnionVocabulary extend_vocab_for_transfer(const UnionVocabulary& vocab,
                                          const TableTokenizer& new_tokenizer);

/// Raw row -> one global token id per column.
std::vector<std::int64_t> encode_row(const TableTokenizer& tokenizer,
                                     const UnionVocabulary& vocab,
                                     std::span<const std::string> row);

/// A fully encoded set of rows from one table, ready for batching.
struct TokenizedTable {
  std::string table_id;
  std::size_t n_cols = 0;
  std::size_t n_rows = 0;
  std::vector<std::int64_t> ids;  // row-major n_rows x n_cols
  std::vector<ColumnRange> col_ranges;
  std::vector<SubspaceRange> col_subspaces;

  std::span<const std::int64_t> row(std::size_t r) const {
    return {ids.data() + r * n_cols, n_cols};
  }
};

TokenizedTable tokenize_rows(const TableTokenizer& tokenizer, const UnionVocabulary& vocab,
                             const RawTable& table, const std::vector<std::size_t>& row_indices);

// --- serialization -----------------------------------------------------------

std::string tokenizer_to_string(const TableTokenizer& tokenizer);
TableTokenizer tokenizer_from_string(std::string_view text);
void save_tokenizer(const TableTokenizer& tokenizer, const std::filesystem::path& path);
TableTokenizer load_tokenizer(const std::filesystem::path& path);

std::string vocab_to_string(const UnionVocabulary& vocab);
UnionVocabulary vocab_from_string(std::string_view text);
void save_vocab(const UnionVocabulary& vocab, const std::filesystem::path& path);
UnionVocabulary load_vocab(const std::filesystem::path& path);

/// Content hash of the canonical vocabulary serialization; checkpoints record
/// it and refuse to load against a different vocabulary.
std::uint64_t vocab_hash(const UnionVocabulary& vocab);

}  // namespace tabrep
