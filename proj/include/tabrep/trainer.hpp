// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tabrep/backbone.hpp"
#include "tabrep/batcher.hpp"

namespace tabrep {

enum class RunMode { SingleTable, CrossTable, Transfer };

std::string_view to_string(RunMode mode);
RunMode run_mode_from_string(std::string_view s);

/// Training hyperparameters. Defaults follow the reference recipe: AdamW with
/// decoupled weight decay 1e-2, betas (0.9, 0.999), eps 1e-8, mask rate 0.25,
/// dropout 0.1, warmup over the first 10% of samples from 5e-5 to 1e-3, then
/// cosine decay to 0, checkpoints every 250M non-pad tokens.
struct RunConfig {
  RunMode mode = RunMode::SingleTable;
  std::string model_preset = "M";
  BackboneConfig backbone = backbone_preset("M");
  std::size_t batch_size = 2048;
  std::uint64_t total_samples = 10'000'000;
  double mask_p = 0.25;
  double lr_init = 5e-5;
  double lr_peak = 1e-3;
  double lr_final = 0.0;
  double warmup_fraction = 0.1;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every_tokens = 250'000'000;
  bool freeze_backbone = false;

  void validate() const;
};

/// Fill batch_size / total_samples from the per-model training presets
/// (single-table: S 2048/5M, M 2048/10M, L 2048/25M; cross-table: M 512/75M,
/// L 512/75M, XL 256/75M). Throws for combinations without a preset.
void apply_training_preset(RunConfig& config);

/// Warmup + cosine schedule on the sample axis: linear from lr_init to lr_peak
/// over the first warmup fraction, then cosine from lr_peak to lr_final.
double lr_at(std::uint64_t samples_seen, std::uint64_t total_samples, const RunConfig& config);

/// First/second moment estimates, mirroring the model tensor-for-tensor.
struct OptimizerState {
  Model<float> m;
  Model<float> v;
  std::uint64_t step = 0;

  static OptimizerState init(const Model<float>& model) {
    return {Model<float>::zeros_like(model), Model<float>::zeros_like(model), 0};
  }
};

/// Decoupled-weight-decay update. Decay applies to weight matrices and the
/// embedding table, never to biases or norm parameters. When freeze_backbone
/// is set, encoder-stack tensors are left bitwise untouched. Non-finite
/// gradients abort before any state is modified.
void adamw_step(Model<float>& model, const Model<float>& grads, OptimizerState& opt, double lr,
                const RunConfig& config);

struct MetricsRecord {
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  double lr = 0.0;
  double loss = 0.0;
  double imp_top1 = 0.0;
  double imp_top3 = 0.0;
};

inline constexpr std::string_view kMetricsHeader = "step,tokens_seen,lr,loss,imp_top1,imp_top3";

std::string format_metrics_row(const MetricsRecord& record);

/// Where a training run writes its artifacts. All fields optional; an empty
/// out_dir keeps the run fully in memory (used by tests).
struct TrainOutputs {
  std::filesystem::path out_dir;
  const UnionVocabulary* vocab = nullptr;
  const std::vector<TableTokenizer>* tokenizers = nullptr;
};

struct RunSummary {
  std::uint64_t steps_run = 0;
  std::uint64_t tokens_seen = 0;
  std::uint64_t samples_seen = 0;
  bool completed = false;
  std::filesystem::path final_checkpoint;  // empty for in-memory runs
};

/// Single-writer training loop. Deterministic: batch, mask, and dropout draws
/// for step i depend only on (seed, i), so an interrupted run resumed from a
/// checkpoint replays the identical batch sequence.
class Trainer {
 public:
  Trainer(RunConfig config, Model<float> model, OptimizerState opt, std::uint64_t vocab_hash);

  static Trainer fresh(const RunConfig& config, std::int64_t vocab_size,
                       std::uint64_t vocab_hash);

  /// Train until total_samples (or max_steps more steps, when nonzero).
  RunSummary run(const std::vector<TokenizedTable>& corpus, const TrainOutputs& out,
                 std::uint64_t max_steps = 0);

  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  OptimizerState& optimizer() { return opt_; }
  const RunConfig& config() const { return config_; }
  const std::vector<MetricsRecord>& metrics() const { return metrics_; }

  std::uint64_t step() const { return step_; }
  std::uint64_t samples_seen() const { return samples_seen_; }
  std::uint64_t tokens_seen() const { return tokens_seen_; }

  /// Restore progress counters when resuming from a checkpoint.
  void restore_progress(std::uint64_t step, std::uint64_t samples_seen,
                        std::uint64_t tokens_seen);

 private:
  std::filesystem::path save_checkpoint_dir(const TrainOutputs& out,
                                            const std::string& name) const;

  RunConfig config_;
  Model<float> model_;
  OptimizerState opt_;
  std::uint64_t vocab_hash_ = 0;
  std::uint64_t step_ = 0;
  std::uint64_t samples_seen_ = 0;
  std::uint64_t tokens_seen_ = 0;
  std::vector<MetricsRecord> metrics_;
};

/// Extend a pretrained model and vocabulary with a new table's tokenizer.
/// Existing ids and parameters are untouched; fresh embedding columns and head
/// rows are initialized from the transfer seed. Returns the extended vocab.
UnionVocabulary prepare_transfer(Model<float>& model, const UnionVocabulary& vocab,
                                 const TableTokenizer& new_tokenizer, std::uint64_t seed);

namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kBatch = 2;
inline constexpr std::uint64_t kMask = 3;
inline constexpr std::uint64_t kDropout = 4;
inline constexpr std::uint64_t kFolds = 5;
inline constexpr std::uint64_t kEvalMask = 6;
inline constexpr std::uint64_t kTransferInit = 7;
}  // namespace streams

}  // namespace tabrep
