// SPDX-License-Identifier: Apache-2.0
#include "tabrep/batcher.hpp"

#include <algorithm>

#include "tabrep/errors.hpp"

namespace tabrep {

RowBatch sample_batch(const std::vector<TokenizedTable>& corpus, std::size_t batch_size,
                      Rng& rng) {
  if (corpus.empty()) throw ConfigError("sample_batch: empty corpus");
  for (const auto& table : corpus) {
    if (table.n_rows == 0)
      throw ConfigError("sample_batch: table '" + table.table_id + "' has no rows");
  }

  RowBatch batch;
  batch.elems.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto d = static_cast<std::size_t>(rng.uniform_below(corpus.size()));
    const TokenizedTable& table = corpus[d];
    const auto r = static_cast<std::size_t>(rng.uniform_below(table.n_rows));
    RowBatch::Element elem;
    elem.table = &table;
    const auto row = table.row(r);
    elem.ids.assign(row.begin(), row.end());
    batch.elems.push_back(std::move(elem));
  }
  return batch;
}

MaskedBatch mask_cells(const RowBatch& batch, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("mask_cells: p must lie in [0, 1]");

  MaskedBatch masked;
  masked.elems.reserve(batch.elems.size());
  for (const auto& src : batch.elems) {
    MaskedBatch::Element elem;
    elem.table = src.table;
    elem.ids = src.ids;
    for (std::size_t pos = 0; pos < elem.ids.size(); ++pos) {
      if (rng.bernoulli(p)) {
        elem.masked_positions.push_back(static_cast<int>(pos));
        elem.targets.push_back(elem.ids[pos]);
        elem.ids[pos] = UnionVocabulary::kMaskId;
      }
    }
    masked.elems.push_back(std::move(elem));
  }
  return masked;
}

PaddedBatch pad_batch(const MaskedBatch& batch) {
  PaddedBatch padded;
  padded.batch_size = batch.elems.size();
  padded.width = 0;
  for (const auto& elem : batch.elems) padded.width = std::max(padded.width, elem.ids.size());

  padded.ids.assign(padded.batch_size * padded.width, UnionVocabulary::kPadId);
  padded.pad_flags.assign(padded.batch_size * padded.width, 1);
  padded.row_lengths.reserve(padded.batch_size);

  for (std::size_t e = 0; e < batch.elems.size(); ++e) {
    const auto& elem = batch.elems[e];
    padded.row_lengths.push_back(elem.ids.size());
    for (std::size_t pos = 0; pos < elem.ids.size(); ++pos) {
      padded.ids[e * padded.width + pos] = elem.ids[pos];
      padded.pad_flags[e * padded.width + pos] = 0;
    }
    for (std::size_t m = 0; m < elem.masked_positions.size(); ++m) {
      PaddedBatch::MaskedCell cell;
      cell.elem = e;
      cell.pos = elem.masked_positions[m];
      cell.target = elem.targets[m];
      cell.range = elem.table->col_subspaces[static_cast<std::size_t>(cell.pos)];
      padded.masked.push_back(cell);
    }
  }
  return padded;
}

std::size_t count_training_tokens(const PaddedBatch& batch) {
  std::size_t total = 0;
  for (const std::size_t len : batch.row_lengths) total += len;
  return total;
}

}  // namespace tabrep
