// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "tabrep/rng.hpp"
#include "tabrep/tokenizer.hpp"

namespace tabrep {

/// A batch of raw (unmasked, unpadded) rows. Elements keep a pointer to their
/// source table so per-position subspace ranges stay available downstream;
/// the corpus must outlive the batch.
struct RowBatch {
  struct Element {
    const TokenizedTable* table = nullptr;
    std::vector<std::int64_t> ids;
  };
  std::vector<Element> elems;
};

/// Stratified sampling: every element first draws a dataset uniformly, then a
/// row uniformly within it (with replacement), so each dataset is equally
/// likely regardless of its size.
RowBatch sample_batch(const std::vector<TokenizedTable>& corpus, std::size_t batch_size, Rng& rng);

/// RowBatch after i.i.d. Bernoulli(p) cell masking. Input ids carry mask_id at
/// masked positions; the original ids are recorded as targets. Rows with zero
/// masked cells are kept and simply contribute no loss terms.
struct MaskedBatch {
  struct Element {
    const TokenizedTable* table = nullptr;
    std::vector<std::int64_t> ids;            // post-replacement
    std::vector<int> masked_positions;
    std::vector<std::int64_t> targets;        // pre-mask ids, one per masked position
  };
  std::vector<Element> elems;
};

MaskedBatch mask_cells(const RowBatch& batch, double p, Rng& rng);

/// Fixed-width batch: rows extended with pad_id to the batch-max length.
/// Masking always precedes padding, so no pad position is ever masked.
struct PaddedBatch {
  std::size_t batch_size = 0;
  std::size_t width = 0;
  std::vector<std::int64_t> ids;        // row-major batch_size x width
  std::vector<std::uint8_t> pad_flags;  // row-major, 1 at appended positions
  std::vector<std::size_t> row_lengths;

  struct MaskedCell {
    std::size_t elem = 0;
    int pos = 0;
    std::int64_t target = 0;
    SubspaceRange range;
  };
  std::vector<MaskedCell> masked;

  std::int64_t id_at(std::size_t elem, std::size_t pos) const { return ids[elem * width + pos]; }
  bool is_pad(std::size_t elem, std::size_t pos) const {
    return pad_flags[elem * width + pos] != 0;
  }
};

PaddedBatch pad_batch(const MaskedBatch& batch);

/// Number of real (non-pad) positions; the unit of training-token accounting.
std::size_t count_training_tokens(const PaddedBatch& batch);

}  // namespace tabrep
