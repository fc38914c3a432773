// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tabrep/checkpoint.hpp"
#include "tabrep/eval.hpp"
#include "tabrep/schema.hpp"
#include "tabrep/tokenizer.hpp"
#include "tabrep/trainer.hpp"

namespace tabrep {

/// Environment variable naming the feature-cache directory.
inline constexpr const char* kCacheDirEnv = "TABREP_CACHE_DIR";

/// Run-file for pretraining: key = value lines, '#' comments, unknown keys
/// rejected. Unset hyperparameters keep the reference defaults; unset
/// batch_size / total_samples are filled from the per-model presets.
struct CliConfig {
  RunConfig run;
  std::filesystem::path manifest;
  std::filesystem::path tokenizer_dir;
  std::filesystem::path out_dir;
  bool batch_size_set = false;
  bool total_samples_set = false;
};

CliConfig parse_cli_config(std::string_view text, const std::filesystem::path& base_dir = {});
CliConfig load_cli_config(const std::filesystem::path& path);
std::string cli_config_to_string(const CliConfig& config);

struct FitTokenizerArgs {
  std::filesystem::path manifest;
  std::filesystem::path out_dir;
  int quantiles = 25;
  int cat_threshold = 20;
  bool corpus_filters = false;  // enables all three curation filters
  bool filter_high_card_cats = false;
  bool filter_min_rows = false;
  bool filter_column_range = false;
  double pretrain_fraction = 0.6;
  std::uint64_t seed = 0;
  std::vector<std::string> missing_sentinels;
};

int cmd_fit_tokenizer(const FitTokenizerArgs& args);

struct PretrainArgs {
  std::filesystem::path config_file;
  // Optional command-line overrides.
  std::optional<std::string> model;
  std::optional<std::string> mode;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> batch_size;
  std::optional<std::uint64_t> total_samples;
  bool resume = false;
  std::uint64_t max_steps = 0;  // stop early after this many steps (resume later)
};

int cmd_pretrain(const PretrainArgs& args);

struct TransferArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::string table;
  std::filesystem::path out_dir;
  bool freeze = false;
  std::size_t batch_size = 256;
  std::uint64_t total_samples = 256'000;
  std::uint64_t seed = 0;
  int quantiles = 25;
  int cat_threshold = 20;
  std::vector<std::string> missing_sentinels;
  std::uint64_t max_steps = 0;
};

int cmd_transfer(const TransferArgs& args);

struct ProbeArgs {
  std::filesystem::path model_dir;
  std::filesystem::path manifest;
  std::string table;
  int folds = 5;
  std::uint64_t seed = 0;
  bool with_baseline = false;
  bool with_imputation = false;
  double imputation_mask_p = 0.25;
  std::filesystem::path out_dir;  // defaults to model_dir
};

int cmd_probe(const ProbeArgs& args);

struct ImputeArgs {
  std::filesystem::path model_dir;
  std::filesystem::path csv;
  std::string table;
  int k = 3;
  std::filesystem::path out_dir;
};

int cmd_impute(const ImputeArgs& args);

struct ReportArgs {
  std::filesystem::path run_dir;
  std::filesystem::path out_file;  // defaults to run_dir/report.csv
};

int cmd_report(const ReportArgs& args);

/// A pretrained model directory: checkpoint tensors plus the vocabulary and
/// tokenizers it was trained with (checkpoints are self-contained).
struct ModelDir {
  LoadedCheckpoint checkpoint;
  UnionVocabulary vocab;
  std::vector<TableTokenizer> tokenizers;
  std::uint64_t content_hash = 0;

  const TableTokenizer& tokenizer_for(std::string_view table_id) const;
};

/// Loads and validates a model directory; refuses vocab-hash mismatches.
ModelDir load_model_dir(const std::filesystem::path& dir, bool need_optimizer);

/// Exclusive ownership of an output directory while training runs in it.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace tabrep
