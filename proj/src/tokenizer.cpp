// SPDX-License-Identifier: Apache-2.0
#include "tabrep/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tabrep/errors.hpp"

namespace tabrep {

namespace {

using nlohmann::ordered_json;

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw ContractError("double formatting failed");
  return std::string(buf, ptr);
}

}  // namespace

QuantileBins fit_numeric(std::span<const double> values, int q) {
  if (q < 2) throw ConfigError("fit_numeric: q must be at least 2");
  std::vector<double> sorted;
  sorted.reserve(values.size());
  for (double v : values) {
    if (!std::isnan(v)) sorted.push_back(v);
  }
  if (sorted.empty())
    throw DataError(
        "fit_numeric: column has no non-missing values; drop it or treat it as a "
        "pure-NAN categorical");
  std::sort(sorted.begin(), sorted.end());

  QuantileBins bins;
  bins.q = q;
  bins.boundaries.reserve(static_cast<std::size_t>(q) - 1);
  const std::size_t n = sorted.size();
  for (int k = 1; k < q; ++k) {
    // Nearest rank: ceil(k*n/q) in exact integer arithmetic, 1-indexed.
    const std::size_t rank =
        (static_cast<std::size_t>(k) * n + static_cast<std::size_t>(q) - 1) /
        static_cast<std::size_t>(q);
    bins.boundaries.push_back(sorted[rank - 1]);
  }
  return bins;
}

int encode_numeric(const QuantileBins& bins, double v) {
  if (std::isnan(v)) return bins.q;  // NAN slot
  // First boundary >= v; ties at a boundary fall into the lower bucket.
  const auto it = std::lower_bound(bins.boundaries.begin(), bins.boundaries.end(), v);
  if (it == bins.boundaries.end()) return bins.q - 1;
  return static_cast<int>(it - bins.boundaries.begin());
}

double bucket_representative(const QuantileBins& bins, int bucket) {
  if (bins.boundaries.empty()) throw ContractError("bucket_representative: unfitted bins");
  if (bucket <= 0) return bins.boundaries.front();
  if (bucket >= bins.q - 1) return bins.boundaries.back();
  return 0.5 * (bins.boundaries[static_cast<std::size_t>(bucket) - 1] +
                bins.boundaries[static_cast<std::size_t>(bucket)]);
}

CategoryMap CategoryMap::fit(std::span<const std::string> values, const MissingPolicy& missing) {
  CategoryMap map;
  for (const auto& value : values) {
    if (missing.is_missing(value)) continue;
    if (map.index.emplace(value, static_cast<int>(map.categories.size())).second)
      map.categories.push_back(value);
  }
  return map;
}

int CategoryMap::lookup(std::string_view value) const {
  const auto it = index.find(std::string(value));
  return it == index.end() ? -1 : it->second;
}

int ColumnTokenizer::encode(std::string_view raw, const MissingPolicy& missing) const {
  if (missing.is_missing(raw)) return nan_slot();
  if (kind == ColumnKind::Numerical) {
    const std::string buf(raw);
    char* end = nullptr;
    const double v = std::strtod(buf.c_str(), &end);
    const char* p = end;
    while (*p != '\0' && std::isspace(static_cast<unsigned char>(*p))) ++p;
    if (end == buf.c_str() || *p != '\0')
      throw DataError("encode: non-numeric value '" + buf + "' in numerical column '" + name +
                      "'");
    if (std::isnan(v)) return nan_slot();
    return encode_numeric(bins, v);
  }
  const int idx = cats.lookup(raw);
  return idx < 0 ? nan_slot() : idx;  // unseen categories share the NAN slot
}

std::string ColumnTokenizer::decode(int local_index) const {
  if (local_index == nan_slot()) return "";
  if (kind == ColumnKind::Categorical) {
    if (local_index < 0 || local_index >= static_cast<int>(cats.categories.size()))
      throw ContractError("decode: local index out of range for column '" + name + "'");
    return cats.categories[static_cast<std::size_t>(local_index)];
  }
  return format_double(bucket_representative(bins, local_index));
}

int TableTokenizer::column_index(std::string_view name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

TableTokenizer fit_table_tokenizer(const RawTable& table, const std::vector<ColumnSpec>& columns,
                                   const std::vector<std::size_t>& sample_rows, int quantiles,
                                   const SplitSpec& split, const MissingPolicy& missing) {
  if (columns.empty()) throw ConfigError("tokenizer: no columns to fit");
  const std::size_t sample_n = std::min(sample_rows.size(), kTokenizerFitCap);
  if (sample_n == 0) throw ConfigError("tokenizer: empty fit sample");

  TableTokenizer tokenizer;
  tokenizer.table_id = table.table_id;
  tokenizer.fit_sample_size = sample_n;
  tokenizer.source_row_count = table.n_rows();
  tokenizer.split = split;
  tokenizer.missing = missing;

  for (const auto& spec : columns) {
    std::size_t col = table.n_cols();
    for (std::size_t c = 0; c < table.n_cols(); ++c) {
      if (table.column_names[c] == spec.name) {
        col = c;
        break;
      }
    }
    if (col == table.n_cols())
      throw ContractError("tokenizer: schema column '" + spec.name + "' not in table");

    ColumnTokenizer ct;
    ct.name = spec.name;
    ct.kind = spec.kind;
    if (spec.kind == ColumnKind::Numerical) {
      std::vector<double> values;
      values.reserve(sample_n);
      for (std::size_t i = 0; i < sample_n; ++i) {
        const std::string& cell = table.rows[sample_rows[i]][col];
        if (missing.is_missing(cell)) {
          values.push_back(std::numeric_limits<double>::quiet_NaN());
          continue;
        }
        const auto v = parse_finite(cell);
        if (!v)
          throw DataError("tokenizer: non-numeric value '" + cell + "' in numerical column '" +
                          spec.name + "' of table '" + table.table_id + "'");
        values.push_back(*v);
      }
      ct.bins = fit_numeric(values, quantiles);
      ct.local_cardinality = quantiles + 1;
    } else {
      std::vector<std::string> values;
      values.reserve(sample_n);
      for (std::size_t i = 0; i < sample_n; ++i) values.push_back(table.rows[sample_rows[i]][col]);
      ct.cats = CategoryMap::fit(values, missing);
      ct.local_cardinality = static_cast<int>(ct.cats.categories.size()) + 1;
    }
    tokenizer.columns.push_back(std::move(ct));
  }
  return tokenizer;
}

int UnionVocabulary::table_index(std::string_view table_id) const {
  for (std::size_t i = 0; i < tables.size(); ++i) {
    if (tables[i].table_id == table_id) return static_cast<int>(i);
  }
  return -1;
}

const UnionVocabulary::TableRanges& UnionVocabulary::find(std::string_view table_id) const {
  const int idx = table_index(table_id);
  if (idx < 0) throw ConfigError("vocab: unknown table '" + std::string(table_id) + "'");
  return tables[static_cast<std::size_t>(idx)];
}

UnionVocabulary build_union_vocab(const std::vector<TableTokenizer>& tokenizers) {
  UnionVocabulary vocab;
  std::int64_t offset = 2;  // ids 0/1 are PAD/MASK
  for (const auto& tokenizer : tokenizers) {
    if (vocab.table_index(tokenizer.table_id) >= 0)
      throw ConfigError("vocab: duplicate table id '" + tokenizer.table_id + "'");
    UnionVocabulary::TableRanges ranges;
    ranges.table_id = tokenizer.table_id;
    for (const auto& col : tokenizer.columns) {
      ranges.column_names.push_back(col.name);
      ranges.columns.push_back({offset, col.local_cardinality});
      offset += col.local_cardinality;
    }
    vocab.tables.push_back(std::move(ranges));
  }
  vocab.total_size = offset;
  return vocab;
}

UnionVocabulary extend_vocab_for_transfer(const UnionVocabulary& vocab,
                                          const TableTokenizer& new_tokenizer) {
  if (vocab.table_index(new_tokenizer.table_id) >= 0)
    throw ConfigError("vocab: table '" + new_tokenizer.table_id + "' already present");
  UnionVocabulary extended = vocab;
  UnionVocabulary::TableRanges ranges;
  ranges.table_id = new_tokenizer.table_id;
  std::int64_t offset = extended.total_size;
  for (const auto& col : new_tokenizer.columns) {
    ranges.column_names.push_back(col.name);
    ranges.columns.push_back({offset, col.local_cardinality});
    offset += col.local_cardinality;
  }
  extended.tables.push_back(std::move(ranges));
  extended.total_size = offset;
  return extended;
}

std::vector<std::int64_t> encode_row(const TableTokenizer& tokenizer, const UnionVocabulary& vocab,
                                     std::span<const std::string> row) {
  if (row.size() != tokenizer.columns.size())
    throw DataError("encode_row: arity " + std::to_string(row.size()) + " != tokenizer columns " +
                    std::to_string(tokenizer.columns.size()));
  const auto& ranges = vocab.find(tokenizer.table_id);
  if (ranges.columns.size() != tokenizer.columns.size())
    throw ContractError("encode_row: vocab/tokenizer column count mismatch for table '" +
                        tokenizer.table_id + "'");
  std::vector<std::int64_t> ids(row.size());
  for (std::size_t c = 0; c < row.size(); ++c) {
    const int local = tokenizer.columns[c].encode(row[c], tokenizer.missing);
    ids[c] = ranges.columns[c].offset + local;
  }
  return ids;
}

TokenizedTable tokenize_rows(const TableTokenizer& tokenizer, const UnionVocabulary& vocab,
                             const RawTable& table, const std::vector<std::size_t>& row_indices) {
  TokenizedTable out;
  out.table_id = tokenizer.table_id;
  out.n_cols = tokenizer.columns.size();
  out.n_rows = row_indices.size();
  out.ids.reserve(out.n_rows * out.n_cols);

  const auto& ranges = vocab.find(tokenizer.table_id);
  out.col_ranges = ranges.columns;
  for (const auto& range : ranges.columns) out.col_subspaces.push_back(vocab.subspace(range));

  // Rows may come from a table whose columns are a superset of the tokenizer's
  // (validation can drop columns), so encode per retained column by name.
  std::vector<std::size_t> col_of(tokenizer.columns.size());
  for (std::size_t tc = 0; tc < tokenizer.columns.size(); ++tc) {
    std::size_t found = table.n_cols();
    for (std::size_t c = 0; c < table.n_cols(); ++c) {
      if (table.column_names[c] == tokenizer.columns[tc].name) {
        found = c;
        break;
      }
    }
    if (found == table.n_cols())
      throw DataError("tokenize: table '" + table.table_id + "' lacks column '" +
                      tokenizer.columns[tc].name + "'");
    col_of[tc] = found;
  }

  for (const std::size_t r : row_indices) {
    if (r >= table.n_rows()) throw ContractError("tokenize: row index out of range");
    for (std::size_t tc = 0; tc < tokenizer.columns.size(); ++tc) {
      const int local = tokenizer.columns[tc].encode(table.rows[r][col_of[tc]], tokenizer.missing);
      out.ids.push_back(ranges.columns[tc].offset + local);
    }
  }
  return out;
}

// --- serialization -----------------------------------------------------------

std::string tokenizer_to_string(const TableTokenizer& tokenizer) {
  ordered_json j;
  j["table_id"] = tokenizer.table_id;
  j["fit_sample_size"] = tokenizer.fit_sample_size;
  j["source_row_count"] = tokenizer.source_row_count;
  j["split"] = {{"pretrain_fraction", tokenizer.split.pretrain_fraction},
                {"seed", tokenizer.split.seed}};
  j["missing_sentinels"] = tokenizer.missing.extra_sentinels;
  j["columns"] = ordered_json::array();
  for (const auto& col : tokenizer.columns) {
    ordered_json c;
    c["name"] = col.name;
    c["kind"] = to_string(col.kind);
    if (col.kind == ColumnKind::Numerical) {
      c["q"] = col.bins.q;
      c["boundaries"] = col.bins.boundaries;
    } else {
      c["categories"] = col.cats.categories;
    }
    c["cardinality"] = col.local_cardinality;
    j["columns"].push_back(std::move(c));
  }
  return j.dump(2) + "\n";
}

TableTokenizer tokenizer_from_string(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  TableTokenizer tokenizer;
  tokenizer.table_id = j.at("table_id").get<std::string>();
  tokenizer.fit_sample_size = j.at("fit_sample_size").get<std::size_t>();
  tokenizer.source_row_count = j.at("source_row_count").get<std::size_t>();
  tokenizer.split.pretrain_fraction = j.at("split").at("pretrain_fraction").get<double>();
  tokenizer.split.seed = j.at("split").at("seed").get<std::uint64_t>();
  tokenizer.missing.extra_sentinels =
      j.at("missing_sentinels").get<std::vector<std::string>>();
  for (const auto& c : j.at("columns")) {
    ColumnTokenizer col;
    col.name = c.at("name").get<std::string>();
    col.kind = column_kind_from_string(c.at("kind").get<std::string>());
    col.local_cardinality = c.at("cardinality").get<int>();
    if (col.kind == ColumnKind::Numerical) {
      col.bins.q = c.at("q").get<int>();
      col.bins.boundaries = c.at("boundaries").get<std::vector<double>>();
      if (static_cast<int>(col.bins.boundaries.size()) != col.bins.q - 1)
        throw IoError("tokenizer: boundary count mismatch in column '" + col.name + "'");
      if (col.local_cardinality != col.bins.q + 1)
        throw IoError("tokenizer: cardinality mismatch in column '" + col.name + "'");
    } else {
      col.cats.categories = c.at("categories").get<std::vector<std::string>>();
      for (std::size_t i = 0; i < col.cats.categories.size(); ++i)
        col.cats.index.emplace(col.cats.categories[i], static_cast<int>(i));
      if (col.local_cardinality != static_cast<int>(col.cats.categories.size()) + 1)
        throw IoError("tokenizer: cardinality mismatch in column '" + col.name + "'");
    }
    tokenizer.columns.push_back(std::move(col));
  }
  return tokenizer;
}

void save_tokenizer(const TableTokenizer& tokenizer, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write tokenizer: " + path.string());
  out << tokenizer_to_string(tokenizer);
  if (!out) throw IoError("write failed: " + path.string());
}

TableTokenizer load_tokenizer(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tokenizer: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return tokenizer_from_string(buf.str());
}

std::string vocab_to_string(const UnionVocabulary& vocab) {
  ordered_json j;
  j["pad_id"] = UnionVocabulary::kPadId;
  j["mask_id"] = UnionVocabulary::kMaskId;
  j["total_size"] = vocab.total_size;
  j["tables"] = ordered_json::array();
  for (const auto& table : vocab.tables) {
    ordered_json t;
    t["table_id"] = table.table_id;
    t["columns"] = ordered_json::array();
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      ordered_json col;
      col["name"] = table.column_names[c];
      col["offset"] = table.columns[c].offset;
      col["cardinality"] = table.columns[c].cardinality;
      t["columns"].push_back(std::move(col));
    }
    j["tables"].push_back(std::move(t));
  }
  return j.dump(2) + "\n";
}

UnionVocabulary vocab_from_string(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  UnionVocabulary vocab;
  vocab.total_size = j.at("total_size").get<std::int64_t>();
  for (const auto& t : j.at("tables")) {
    UnionVocabulary::TableRanges ranges;
    ranges.table_id = t.at("table_id").get<std::string>();
    for (const auto& c : t.at("columns")) {
      ranges.column_names.push_back(c.at("name").get<std::string>());
      ranges.columns.push_back(
          {c.at("offset").get<std::int64_t>(), c.at("cardinality").get<int>()});
    }
    vocab.tables.push_back(std::move(ranges));
  }
  // Validate the disjoint tiling invariant on load.
  std::int64_t expected = 2;
  for (const auto& table : vocab.tables) {
    for (const auto& col : table.columns) {
      if (col.offset != expected) throw IoError("vocab: ranges do not tile [2, total_size)");
      expected += col.cardinality;
    }
  }
  if (expected != vocab.total_size) throw IoError("vocab: total_size does not match ranges");
  return vocab;
}

void save_vocab(const UnionVocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocab: " + path.string());
  out << vocab_to_string(vocab);
  if (!out) throw IoError("write failed: " + path.string());
}

UnionVocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocab: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return vocab_from_string(buf.str());
}

std::uint64_t vocab_hash(const UnionVocabulary& vocab) {
  const std::string text = vocab_to_string(vocab);
  return fnv1a_64(text.data(), text.size());
}

}  // namespace tabrep
