// SPDX-License-Identifier: Apache-2.0
#include "tabrep/commands.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fcntl.h>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "tabrep/csv.hpp"
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

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

double parse_double_or_throw(std::string_view value, std::string_view key) {
  const auto v = parse_finite(value);
  if (!v) throw ConfigError("config: key '" + std::string(key) + "' is not a number");
  return *v;
}

std::uint64_t parse_u64_or_throw(std::string_view value, std::string_view key) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size())
    throw ConfigError("config: key '" + std::string(key) + "' is not an unsigned integer");
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write: " + path.string());
  out << content;
  if (!out) throw IoError("write failed: " + path.string());
}

ordered_json probe_result_to_json(const ProbeResult& result, std::string_view table, int folds,
                                  std::uint64_t seed) {
  ordered_json j;
  j["table_id"] = std::string(table);
  j["task"] = std::string(to_string(result.task));
  j["metric"] = result.metric_name;
  j["folds"] = folds;
  j["seed"] = seed;
  j["fold_scores"] = result.fold_scores;
  if (!result.fold_mse.empty()) j["fold_mse"] = result.fold_mse;
  j["mean"] = result.mean;
  j["stddev"] = result.stddev;
  return j;
}

std::string probe_result_to_csv(const ProbeResult& result) {
  std::string csv = "fold," + result.metric_name + (result.fold_mse.empty() ? "" : ",mse");
  csv += "\n";
  for (std::size_t f = 0; f < result.fold_scores.size(); ++f) {
    csv += std::to_string(f) + "," + format_double(result.fold_scores[f]);
    if (!result.fold_mse.empty()) csv += "," + format_double(result.fold_mse[f]);
    csv += "\n";
  }
  csv += "mean," + format_double(result.mean) + (result.fold_mse.empty() ? "" : ",");
  csv += "\nstddev," + format_double(result.stddev) + (result.fold_mse.empty() ? "" : ",");
  csv += "\n";
  return csv;
}

ValidationOptions validation_options(const FitTokenizerArgs& args) {
  ValidationOptions options;
  options.drop_high_cardinality_cats = args.corpus_filters || args.filter_high_card_cats;
  options.enforce_min_rows = args.corpus_filters || args.filter_min_rows;
  options.enforce_column_range = args.corpus_filters || args.filter_column_range;
  return options;
}

/// Recompute the pretrain/eval split a tokenizer was fitted under and check
/// the table still matches.
RowSplit recover_split(const TableTokenizer& tokenizer, const RawTable& table) {
  if (table.n_rows() != tokenizer.source_row_count)
    throw DataError("table '" + table.table_id + "' has " + std::to_string(table.n_rows()) +
                    " rows but its tokenizer was fitted on " +
                    std::to_string(tokenizer.source_row_count) +
                    "; refit the tokenizers");
  return split_rows(table.n_rows(), tokenizer.split);
}

}  // namespace

CliConfig parse_cli_config(std::string_view text, const std::filesystem::path& base_dir) {
  CliConfig config;
  bool dropout_set = false, activation_set = false;
  std::string model = config.run.model_preset;

  std::size_t pos = 0;
  std::size_t line_no = 0;
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
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));

    auto path_value = [&]() {
      std::filesystem::path p(value);
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      return p;
    };

    if (key == "manifest") config.manifest = path_value();
    else if (key == "tokenizer_dir") config.tokenizer_dir = path_value();
    else if (key == "out_dir") config.out_dir = path_value();
    else if (key == "mode") config.run.mode = run_mode_from_string(value);
    else if (key == "model") model = value;
    else if (key == "batch_size") {
      config.run.batch_size = static_cast<std::size_t>(parse_u64_or_throw(value, key));
      config.batch_size_set = true;
    } else if (key == "total_samples") {
      config.run.total_samples = parse_u64_or_throw(value, key);
      config.total_samples_set = true;
    } else if (key == "mask_p") config.run.mask_p = parse_double_or_throw(value, key);
    else if (key == "dropout") {
      config.run.backbone.dropout = parse_double_or_throw(value, key);
      dropout_set = true;
    } else if (key == "activation") {
      config.run.backbone.activation = value == "relu" ? BackboneConfig::Activation::Relu
                                                       : BackboneConfig::Activation::Gelu;
      if (value != "relu" && value != "gelu")
        throw ConfigError("config: activation must be gelu or relu");
      activation_set = true;
    } else if (key == "lr_init") config.run.lr_init = parse_double_or_throw(value, key);
    else if (key == "lr_peak") config.run.lr_peak = parse_double_or_throw(value, key);
    else if (key == "lr_final") config.run.lr_final = parse_double_or_throw(value, key);
    else if (key == "warmup_fraction")
      config.run.warmup_fraction = parse_double_or_throw(value, key);
    else if (key == "weight_decay") config.run.weight_decay = parse_double_or_throw(value, key);
    else if (key == "adam_beta1") config.run.beta1 = parse_double_or_throw(value, key);
    else if (key == "adam_beta2") config.run.beta2 = parse_double_or_throw(value, key);
    else if (key == "adam_eps") config.run.eps = parse_double_or_throw(value, key);
    else if (key == "seed") config.run.seed = parse_u64_or_throw(value, key);
    else if (key == "checkpoint_every_tokens")
      config.run.checkpoint_every_tokens = parse_u64_or_throw(value, key);
    else
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }

  const double dropout = config.run.backbone.dropout;
  const auto activation = config.run.backbone.activation;
  config.run.model_preset = model;
  config.run.backbone = backbone_preset(model);
  if (dropout_set) config.run.backbone.dropout = dropout;
  if (activation_set) config.run.backbone.activation = activation;
  return config;
}

CliConfig load_cli_config(const std::filesystem::path& path) {
  return parse_cli_config(read_text_file(path), path.parent_path());
}

std::string cli_config_to_string(const CliConfig& config) {
  std::string out;
  out += "manifest = " + config.manifest.string() + "\n";
  out += "tokenizer_dir = " + config.tokenizer_dir.string() + "\n";
  out += "out_dir = " + config.out_dir.string() + "\n";
  out += "mode = " + std::string(to_string(config.run.mode)) + "\n";
  out += "model = " + config.run.model_preset + "\n";
  out += "batch_size = " + std::to_string(config.run.batch_size) + "\n";
  out += "total_samples = " + std::to_string(config.run.total_samples) + "\n";
  out += "mask_p = " + format_double(config.run.mask_p) + "\n";
  out += "dropout = " + format_double(config.run.backbone.dropout) + "\n";
  out += std::string("activation = ") +
         (config.run.backbone.activation == BackboneConfig::Activation::Relu ? "relu" : "gelu") +
         "\n";
  out += "lr_init = " + format_double(config.run.lr_init) + "\n";
  out += "lr_peak = " + format_double(config.run.lr_peak) + "\n";
  out += "lr_final = " + format_double(config.run.lr_final) + "\n";
  out += "warmup_fraction = " + format_double(config.run.warmup_fraction) + "\n";
  out += "weight_decay = " + format_double(config.run.weight_decay) + "\n";
  out += "adam_beta1 = " + format_double(config.run.beta1) + "\n";
  out += "adam_beta2 = " + format_double(config.run.beta2) + "\n";
  out += "adam_eps = " + format_double(config.run.eps) + "\n";
  out += "seed = " + std::to_string(config.run.seed) + "\n";
  out += "checkpoint_every_tokens = " + std::to_string(config.run.checkpoint_every_tokens) + "\n";
  return out;
}

DirLock::DirLock(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  path_ = dir / ".lock";
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0)
    throw ConfigError("output directory '" + dir.string() +
                      "' is locked by another run (remove " + path_.string() +
                      " if that run is dead)");
  ::close(fd);
}

DirLock::~DirLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

int cmd_fit_tokenizer(const FitTokenizerArgs& args) {
  const CorpusManifest manifest = load_manifest(args.manifest);
  if (manifest.entries.empty()) throw ConfigError("fit-tokenizer: manifest has no tables");

  std::filesystem::create_directories(args.out_dir / "schemas");
  std::filesystem::create_directories(args.out_dir / "tokenizers");

  MissingPolicy missing;
  missing.extra_sentinels = args.missing_sentinels;
  SchemaOptions schema_options;
  schema_options.categorical_threshold = args.cat_threshold;
  schema_options.missing = missing;
  const ValidationOptions val_options = validation_options(args);

  std::vector<TableTokenizer> tokenizers;
  std::vector<std::string> failures;
  ordered_json summary;
  summary["tables"] = ordered_json::array();

  for (const auto& entry : manifest.entries) {
    try {
      const RawTable table = read_csv(entry.path, entry.table_id);
      const TableSchema schema = infer_schema(table, schema_options);
      const ValidationReport report = validate_for_corpus(schema, val_options);
      if (!report.pass) {
        std::string reason = "corpus filters failed:";
        for (const auto& failure : report.failures) reason += " " + failure + ";";
        throw DataError(reason);
      }
      write_text_file(args.out_dir / "schemas" / (entry.table_id + ".json"),
                      schema_to_string(schema));

      SplitSpec split_spec{args.pretrain_fraction, args.seed};
      const RowSplit split = split_rows(table.n_rows(), split_spec);
      std::vector<std::size_t> fit_rows(
          split.pretrain.begin(),
          split.pretrain.begin() +
              static_cast<std::ptrdiff_t>(std::min(split.pretrain.size(), kTokenizerFitCap)));
      TableTokenizer tokenizer =
          fit_table_tokenizer(table, report.kept, fit_rows, args.quantiles, split_spec, missing);
      save_tokenizer(tokenizer, args.out_dir / "tokenizers" / (entry.table_id + ".json"));

      ordered_json t;
      t["table_id"] = entry.table_id;
      t["rows"] = table.n_rows();
      t["columns_kept"] = report.kept.size();
      t["columns_dropped"] = report.dropped.size();
      std::int64_t cardinality = 0;
      for (const auto& col : tokenizer.columns) cardinality += col.local_cardinality;
      t["cardinality_sum"] = cardinality;
      summary["tables"].push_back(std::move(t));
      tokenizers.push_back(std::move(tokenizer));
    } catch (const std::exception& e) {
      failures.push_back(entry.table_id + ": " + e.what());
    }
  }

  if (!tokenizers.empty()) {
    const UnionVocabulary vocab = build_union_vocab(tokenizers);
    save_vocab(vocab, args.out_dir / "vocab.json");
    summary["vocab_total_size"] = vocab.total_size;
    char hex[19];
    std::snprintf(hex, sizeof(hex), "0x%016llx",
                  static_cast<unsigned long long>(vocab_hash(vocab)));
    summary["vocab_hash"] = hex;
  }
  summary["failures"] = failures;
  write_text_file(args.out_dir / "summary.json", summary.dump(2) + "\n");

  for (const auto& failure : failures) std::cerr << "fit-tokenizer: " << failure << "\n";
  return failures.empty() ? 0 : 1;
}

const TableTokenizer& ModelDir::tokenizer_for(std::string_view table_id) const {
  for (const auto& tokenizer : tokenizers) {
    if (tokenizer.table_id == table_id) return tokenizer;
  }
  throw ConfigError("model dir has no tokenizer for table '" + std::string(table_id) + "'");
}

ModelDir load_model_dir(const std::filesystem::path& dir, bool need_optimizer) {
  ModelDir model_dir;
  model_dir.checkpoint = load_checkpoint(dir, need_optimizer);
  model_dir.vocab = load_vocab(dir / "vocab.json");
  if (vocab_hash(model_dir.vocab) != model_dir.checkpoint.meta.vocab_hash)
    throw IoError("checkpoint at " + dir.string() +
                  " was trained with a different vocabulary; refusing to load");
  if (model_dir.vocab.total_size != model_dir.checkpoint.model.vocab_size)
    throw IoError("checkpoint vocabulary size mismatch at " + dir.string());
  const auto tok_dir = dir / "tokenizers";
  if (std::filesystem::exists(tok_dir)) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(tok_dir)) {
      if (entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) model_dir.tokenizers.push_back(load_tokenizer(file));
  }
  model_dir.content_hash = checkpoint_content_hash(dir);
  return model_dir;
}

namespace {

struct CorpusData {
  std::vector<RawTable> tables;
  std::vector<TableTokenizer> tokenizers;
  std::vector<TokenizedTable> pretrain;
  UnionVocabulary vocab;
};

CorpusData load_training_corpus(const CorpusManifest& manifest,
                                const std::filesystem::path& tokenizer_dir) {
  CorpusData data;
  data.vocab = load_vocab(tokenizer_dir / "vocab.json");
  for (const auto& entry : manifest.entries) {
    const auto tok_path = tokenizer_dir / "tokenizers" / (entry.table_id + ".json");
    if (!std::filesystem::exists(tok_path))
      throw ConfigError("no tokenizer for table '" + entry.table_id + "' under " +
                        tokenizer_dir.string() + "; run fit-tokenizer first");
    TableTokenizer tokenizer = load_tokenizer(tok_path);
    RawTable table = read_csv(entry.path, entry.table_id);
    const RowSplit split = recover_split(tokenizer, table);
    data.pretrain.push_back(tokenize_rows(tokenizer, data.vocab, table, split.pretrain));
    data.tables.push_back(std::move(table));
    data.tokenizers.push_back(std::move(tokenizer));
  }
  return data;
}

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& out_dir) {
  const auto dir = out_dir / "checkpoints";
  if (!std::filesystem::exists(dir)) return std::nullopt;
  std::optional<std::filesystem::path> best;
  std::uint64_t best_tokens = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_directory()) continue;
    const auto manifest_path = entry.path() / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) continue;
    const auto manifest = nlohmann::json::parse(read_text_file(manifest_path));
    const auto tokens = manifest.at("tokens_seen").get<std::uint64_t>();
    if (!best || tokens >= best_tokens) {
      best = entry.path();
      best_tokens = tokens;
    }
  }
  return best;
}

}  // namespace

int cmd_pretrain(const PretrainArgs& args) {
  CliConfig config = load_cli_config(args.config_file);
  if (args.model) {
    config.run.model_preset = *args.model;
    const double dropout = config.run.backbone.dropout;
    const auto activation = config.run.backbone.activation;
    config.run.backbone = backbone_preset(*args.model);
    config.run.backbone.dropout = dropout;
    config.run.backbone.activation = activation;
  }
  if (args.mode) config.run.mode = run_mode_from_string(*args.mode);
  if (args.out_dir) config.out_dir = *args.out_dir;
  if (args.seed) config.run.seed = *args.seed;
  if (args.batch_size) {
    config.run.batch_size = *args.batch_size;
    config.batch_size_set = true;
  }
  if (args.total_samples) {
    config.run.total_samples = *args.total_samples;
    config.total_samples_set = true;
  }
  if (!config.batch_size_set || !config.total_samples_set) apply_training_preset(config.run);
  if (config.manifest.empty()) throw ConfigError("pretrain: config must set 'manifest'");
  if (config.tokenizer_dir.empty()) throw ConfigError("pretrain: config must set 'tokenizer_dir'");
  if (config.out_dir.empty()) throw ConfigError("pretrain: config must set 'out_dir'");
  config.run.validate();

  const CorpusManifest manifest = load_manifest(config.manifest);
  if (config.run.mode == RunMode::SingleTable && manifest.entries.size() != 1)
    throw ConfigError("pretrain: single-table mode requires a one-table manifest");
  if (config.run.mode == RunMode::Transfer)
    throw ConfigError("pretrain: use the transfer command for transfer runs");

  CorpusData corpus = load_training_corpus(manifest, config.tokenizer_dir);
  const std::uint64_t vhash = vocab_hash(corpus.vocab);

  const DirLock lock(config.out_dir);
  write_text_file(config.out_dir / "run_config.cfg", cli_config_to_string(config));

  Trainer trainer = [&] {
    if (args.resume) {
      const auto resume_dir = latest_checkpoint(config.out_dir);
      if (!resume_dir) throw ConfigError("pretrain: --resume but no checkpoint found");
      LoadedCheckpoint loaded = load_checkpoint(*resume_dir, true);
      if (loaded.meta.vocab_hash != vhash)
        throw IoError("pretrain: checkpoint vocabulary differs from tokenizer_dir vocabulary");
      Trainer t(config.run, std::move(loaded.model), std::move(*loaded.opt), vhash);
      t.restore_progress(loaded.meta.step, loaded.meta.samples_seen, loaded.meta.tokens_seen);
      std::cout << "pretrain: resuming from " << resume_dir->string() << " at step "
                << loaded.meta.step << "\n";
      return t;
    }
    return Trainer::fresh(config.run, corpus.vocab.total_size, vhash);
  }();

  TrainOutputs outputs;
  outputs.out_dir = config.out_dir;
  outputs.vocab = &corpus.vocab;
  outputs.tokenizers = &corpus.tokenizers;
  const RunSummary summary = trainer.run(corpus.pretrain, outputs, args.max_steps);

  std::cout << "pretrain: " << summary.steps_run << " steps, " << summary.samples_seen
            << " samples, " << summary.tokens_seen << " tokens"
            << (summary.completed ? ", completed" : ", stopped early") << "\n";
  if (summary.completed)
    std::cout << "pretrain: final checkpoint at " << summary.final_checkpoint.string() << "\n";
  return 0;
}

int cmd_transfer(const TransferArgs& args) {
  const ModelDir source = load_model_dir(args.checkpoint, false);
  const CorpusManifest manifest = load_manifest(args.manifest);
  const ManifestEntry& entry = manifest.find(args.table);

  if (source.vocab.table_index(args.table) >= 0)
    throw ConfigError("transfer: table '" + args.table + "' already in the vocabulary");

  MissingPolicy missing;
  missing.extra_sentinels = args.missing_sentinels;
  SchemaOptions schema_options;
  schema_options.categorical_threshold = args.cat_threshold;
  schema_options.missing = missing;

  const RawTable table = read_csv(entry.path, entry.table_id);
  const TableSchema schema = infer_schema(table, schema_options);
  const SplitSpec split_spec{0.6, args.seed};
  const RowSplit split = split_rows(table.n_rows(), split_spec);
  std::vector<std::size_t> fit_rows(
      split.pretrain.begin(),
      split.pretrain.begin() +
          static_cast<std::ptrdiff_t>(std::min(split.pretrain.size(), kTokenizerFitCap)));
  TableTokenizer tokenizer =
      fit_table_tokenizer(table, schema.columns, fit_rows, args.quantiles, split_spec, missing);

  RunConfig run = source.checkpoint.meta.run;
  run.mode = RunMode::Transfer;
  run.freeze_backbone = args.freeze;
  run.batch_size = args.batch_size;
  run.total_samples = args.total_samples;
  run.seed = args.seed;
  run.validate();

  Model<float> model = source.checkpoint.model;
  const UnionVocabulary extended = prepare_transfer(model, source.vocab, tokenizer, args.seed);
  const std::uint64_t vhash = vocab_hash(extended);

  std::vector<TableTokenizer> all_tokenizers = source.tokenizers;
  all_tokenizers.push_back(tokenizer);
  std::vector<TokenizedTable> corpus;
  corpus.push_back(tokenize_rows(tokenizer, extended, table, split.pretrain));

  const DirLock lock(args.out_dir);
  OptimizerState opt = OptimizerState::init(model);
  Trainer trainer(run, std::move(model), std::move(opt), vhash);

  TrainOutputs outputs;
  outputs.out_dir = args.out_dir;
  outputs.vocab = &extended;
  outputs.tokenizers = &all_tokenizers;
  const RunSummary summary = trainer.run(corpus, outputs, args.max_steps);

  std::cout << "transfer: " << summary.steps_run << " steps on '" << args.table << "'"
            << (run.freeze_backbone ? " (frozen backbone)" : "") << "\n";
  if (summary.completed)
    std::cout << "transfer: final checkpoint at " << summary.final_checkpoint.string() << "\n";
  return 0;
}

int cmd_probe(const ProbeArgs& args) {
  const ModelDir model_dir = load_model_dir(args.model_dir, false);
  const CorpusManifest manifest = load_manifest(args.manifest);
  const ManifestEntry& entry = manifest.find(args.table);
  if (entry.task == TaskKind::None)
    throw ConfigError("probe: table '" + args.table + "' has no task in the manifest");

  const TableTokenizer& tokenizer = model_dir.tokenizer_for(args.table);
  const RawTable table = read_csv(entry.path, entry.table_id);
  const RowSplit split = recover_split(tokenizer, table);

  const int target_col = tokenizer.column_index(entry.target_column);
  if (target_col < 0)
    throw ConfigError("probe: target column '" + entry.target_column +
                      "' is not among the tokenized columns of '" + args.table + "'");

  // Drop eval rows whose target is missing.
  std::size_t raw_target = table.n_cols();
  for (std::size_t c = 0; c < table.n_cols(); ++c) {
    if (table.column_names[c] == entry.target_column) {
      raw_target = c;
      break;
    }
  }
  std::vector<std::size_t> eval_rows;
  eval_rows.reserve(split.eval.size());
  for (const std::size_t r : split.eval) {
    if (!tokenizer.missing.is_missing(table.rows[r][raw_target])) eval_rows.push_back(r);
  }
  if (eval_rows.empty()) throw DataError("probe: no eval rows with a target value");

  std::filesystem::path cache_dir;
  if (const char* env = std::getenv(kCacheDirEnv); env && *env) cache_dir = env;

  const FeatureMatrix features =
      extract_features_cached(model_dir.checkpoint.model, table, eval_rows, tokenizer,
                              model_dir.vocab, target_col, cache_dir, model_dir.content_hash);
  const ProbeTargets targets =
      decode_targets(features.raw_targets, entry.task, tokenizer.missing);

  const ProbeResult probe =
      linear_probe(features.features.cast<double>(), targets, args.folds, args.seed);

  const auto out_dir = args.out_dir.empty() ? args.model_dir : args.out_dir;
  std::filesystem::create_directories(out_dir);
  write_text_file(out_dir / ("probe_" + args.table + ".json"),
                  probe_result_to_json(probe, args.table, args.folds, args.seed).dump(2) + "\n");
  write_text_file(out_dir / ("probe_" + args.table + ".csv"), probe_result_to_csv(probe));
  std::cout << "probe " << args.table << ": " << probe.metric_name << " mean "
            << format_double(probe.mean) << " stddev " << format_double(probe.stddev) << "\n";

  if (args.with_baseline) {
    const TableSchema schema = infer_schema(table, SchemaOptions{20, tokenizer.missing});
    const ProbeResult baseline =
        baseline_linear(table, eval_rows, schema, entry.target_column, entry.task, args.folds,
                        args.seed, tokenizer.missing);
    write_text_file(
        out_dir / ("baseline_" + args.table + ".json"),
        probe_result_to_json(baseline, args.table, args.folds, args.seed).dump(2) + "\n");
    write_text_file(out_dir / ("baseline_" + args.table + ".csv"), probe_result_to_csv(baseline));
    std::cout << "baseline " << args.table << ": " << baseline.metric_name << " mean "
              << format_double(baseline.mean) << "\n";
  }

  if (args.with_imputation) {
    const int ks[] = {1, 3};
    const ImputationAccuracy acc =
        imputation_accuracy(model_dir.checkpoint.model, table, split.eval, tokenizer,
                            model_dir.vocab, args.imputation_mask_p, ks, args.seed);
    ordered_json j;
    j["table_id"] = args.table;
    j["mask_p"] = args.imputation_mask_p;
    j["masked_cells"] = acc.masked_cells;
    j["top1"] = acc.at(1);
    j["top3"] = acc.at(3);
    write_text_file(out_dir / ("imputation_" + args.table + ".json"), j.dump(2) + "\n");
    std::cout << "imputation " << args.table << ": top1 " << format_double(acc.at(1)) << " top3 "
              << format_double(acc.at(3)) << "\n";
  }
  return 0;
}

int cmd_impute(const ImputeArgs& args) {
  if (args.k < 1) throw ConfigError("impute: k must be at least 1");
  const ModelDir model_dir = load_model_dir(args.model_dir, false);
  const TableTokenizer& tokenizer = model_dir.tokenizer_for(args.table);
  RawTable table = read_csv(args.csv, args.table);

  // Schema check: every tokenized column must be present.
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
      throw DataError("impute: csv lacks column '" + tokenizer.columns[tc].name +
                      "' required by the tokenizer for table '" + args.table + "'");
    col_of[tc] = found;
  }

  std::filesystem::create_directories(args.out_dir);
  std::string sidecar = "row,column,rank,value,probability,is_nan\n";

  std::vector<std::string> row_values(tokenizer.columns.size());
  std::vector<int> hidden;
  std::size_t filled_cells = 0;
  for (std::size_t r = 0; r < table.n_rows(); ++r) {
    hidden.clear();
    for (std::size_t tc = 0; tc < tokenizer.columns.size(); ++tc) {
      row_values[tc] = table.rows[r][col_of[tc]];
      if (tokenizer.missing.is_missing(row_values[tc])) hidden.push_back(static_cast<int>(tc));
    }
    if (hidden.empty()) continue;

    const auto candidates =
        impute(model_dir.checkpoint.model, tokenizer, model_dir.vocab,
               std::span<const std::string>(row_values), std::span<const int>(hidden), args.k);
    for (std::size_t h = 0; h < hidden.size(); ++h) {
      const auto tc = static_cast<std::size_t>(hidden[h]);
      const auto& cands = candidates[h];
      if (!cands.empty() && !cands.front().is_missing) {
        table.rows[r][col_of[tc]] = cands.front().value;
        ++filled_cells;
      }
      for (std::size_t rank = 0; rank < cands.size(); ++rank) {
        sidecar += std::to_string(r) + "," + csv_escape(tokenizer.columns[tc].name) + "," +
                   std::to_string(rank + 1) + "," + csv_escape(cands[rank].value) + "," +
                   format_double(cands[rank].probability) + "," +
                   (cands[rank].is_missing ? "1" : "0") + "\n";
      }
    }
  }

  write_csv(table, args.out_dir / "imputed.csv");
  write_text_file(args.out_dir / "impute_candidates.csv", sidecar);
  std::cout << "impute: filled " << filled_cells << " cells in " << table.n_rows() << " rows\n";
  return 0;
}

int cmd_report(const ReportArgs& args) {
  std::vector<std::filesystem::path> checkpoint_dirs;
  const auto ckpt_root = args.run_dir / "checkpoints";
  if (std::filesystem::exists(ckpt_root)) {
    for (const auto& entry : std::filesystem::directory_iterator(ckpt_root)) {
      if (entry.is_directory() && std::filesystem::exists(entry.path() / "manifest.json"))
        checkpoint_dirs.push_back(entry.path());
    }
  } else if (std::filesystem::exists(args.run_dir / "manifest.json")) {
    checkpoint_dirs.push_back(args.run_dir);
  }
  if (checkpoint_dirs.empty())
    throw ConfigError("report: no checkpoints under " + args.run_dir.string());

  struct Row {
    std::uint64_t tokens;
    std::string text;
  };
  std::vector<Row> rows;
  for (const auto& dir : checkpoint_dirs) {
    const auto manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    const auto step = manifest.at("step").get<std::uint64_t>();
    const auto tokens = manifest.at("tokens_seen").get<std::uint64_t>();
    const std::string prefix = dir.filename().string() + "," + std::to_string(step) + "," +
                               std::to_string(tokens) + ",";

    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      const auto name = entry.path().filename().string();
      const bool is_probe = name.rfind("probe_", 0) == 0 && entry.path().extension() == ".json";
      const bool is_baseline =
          name.rfind("baseline_", 0) == 0 && entry.path().extension() == ".json";
      const bool is_imputation =
          name.rfind("imputation_", 0) == 0 && entry.path().extension() == ".json";
      if (is_probe || is_baseline) {
        const auto j = nlohmann::json::parse(read_text_file(entry.path()));
        rows.push_back({tokens, prefix + (is_probe ? "probe," : "baseline,") +
                                    j.at("table_id").get<std::string>() + "," +
                                    j.at("metric").get<std::string>() + "," +
                                    format_double(j.at("mean").get<double>()) + "," +
                                    format_double(j.at("stddev").get<double>())});
      } else if (is_imputation) {
        const auto j = nlohmann::json::parse(read_text_file(entry.path()));
        const auto table_id = j.at("table_id").get<std::string>();
        rows.push_back({tokens, prefix + "imputation," + table_id + ",top1," +
                                    format_double(j.at("top1").get<double>()) + ","});
        rows.push_back({tokens, prefix + "imputation," + table_id + ",top3," +
                                    format_double(j.at("top3").get<double>()) + ","});
      }
    }
  }

  std::stable_sort(rows.begin(), rows.end(),
                   [](const Row& a, const Row& b) { return a.tokens < b.tokens; });
  std::string csv = "checkpoint,step,tokens_seen,kind,table,metric,mean,stddev\n";
  for (const auto& row : rows) csv += row.text + "\n";

  const auto out = args.out_file.empty() ? args.run_dir / "report.csv" : args.out_file;
  write_text_file(out, csv);
  std::cout << "report: " << rows.size() << " rows -> " << out.string() << "\n";
  return 0;
}

}  // namespace tabrep
