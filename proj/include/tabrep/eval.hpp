// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tabrep/backbone.hpp"
#include "tabrep/schema.hpp"
#include "tabrep/tokenizer.hpp"

namespace tabrep {

/// Mean-pooled row embeddings (one row per source row) plus the raw target
/// strings, aligned with the given row order.
struct FeatureMatrix {
  Eigen::MatrixXf features;  // n x d
  std::vector<std::string> raw_targets;
};

/// Encode the given rows with the frozen model (eval mode: no dropout, no
/// random masking) and mean-pool the contextualized tokens. When the table has
/// a designated target column its cell is replaced by the MASK token before
/// encoding, so pooled features never see the label.
FeatureMatrix extract_features(const Model<float>& model, const RawTable& table,
                               const std::vector<std::size_t>& rows,
                               const TableTokenizer& tokenizer, const UnionVocabulary& vocab,
                               std::optional<int> target_col);

/// Cached variant: looks up / stores the feature block keyed by the model
/// content hash and table identity under cache_dir (no-op when empty).
FeatureMatrix extract_features_cached(const Model<float>& model, const RawTable& table,
                                      const std::vector<std::size_t>& rows,
                                      const TableTokenizer& tokenizer,
                                      const UnionVocabulary& vocab, std::optional<int> target_col,
                                      const std::filesystem::path& cache_dir,
                                      std::uint64_t model_hash);

/// Typed probe targets decoded from raw strings (rows with missing targets
/// are dropped by the caller before feature extraction).
struct ProbeTargets {
  TaskKind task = TaskKind::None;
  std::vector<int> labels;    // classification
  int n_classes = 0;
  std::vector<double> values; // regression
};

ProbeTargets decode_targets(const std::vector<std::string>& raw, TaskKind task,
                            const MissingPolicy& missing);

/// Seeded disjoint exhaustive fold assignment (shuffle then chunk); shared by
/// probe and baseline so scores are paired.
std::vector<std::vector<std::size_t>> make_folds(std::size_t n, int folds, std::uint64_t seed);

struct ProbeResult {
  TaskKind task = TaskKind::None;
  std::string metric_name;            // "accuracy" or "r2"
  std::vector<double> fold_scores;
  std::vector<double> fold_mse;       // regression only
  double mean = 0.0;
  double stddev = 0.0;                // sample std over folds
};

/// K-fold linear probing: L2-regularized multinomial logistic regression
/// (lambda 1.0, L-BFGS to gradient norm 1e-6 or 1000 iterations) for
/// classification, ridge regression (alpha 1e-3) scored by the coefficient of
/// determination for regression. Fold assignment is re-seeded once if a train
/// fold is single-class, then fails.
ProbeResult linear_probe(const Eigen::MatrixXd& features, const ProbeTargets& targets, int folds,
                         std::uint64_t seed);

/// Supervised baseline on the raw features: train-fold standardization for
/// numericals, one-hot encoding for categoricals, train-fold mean/mode
/// imputation for missing cells; same folds and solvers as linear_probe.
ProbeResult baseline_linear(const RawTable& table, const std::vector<std::size_t>& rows,
                            const TableSchema& schema, std::string_view target_column,
                            TaskKind task, int folds, std::uint64_t seed,
                            const MissingPolicy& missing);

struct ImputationAccuracy {
  std::vector<std::pair<int, double>> by_k;  // (k, accuracy), in the order requested
  std::size_t masked_cells = 0;

  double at(int k) const;
};

/// Seeded Bernoulli cell masking over the given rows (as in training),
/// accuracy@k = fraction of masked cells whose true token ranks in the top-k
/// of its subspace. Re-seeds once if no cell was masked, then fails.
ImputationAccuracy imputation_accuracy(const Model<float>& model, const RawTable& table,
                                       const std::vector<std::size_t>& rows,
                                       const TableTokenizer& tokenizer,
                                       const UnionVocabulary& vocab, double mask_p,
                                       std::span<const int> ks, std::uint64_t seed);

/// Rank of each masked cell's true token among its subspace logits (eval-mode
/// forward). Exposed for accuracy@k aggregation and tests.
std::vector<int> masked_cell_ranks(const Model<float>& model, const PaddedBatch& batch);

}  // namespace tabrep
