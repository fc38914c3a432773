// SPDX-License-Identifier: Apache-2.0
#include "tabrep/trainer.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

#include "tabrep/checkpoint.hpp"

namespace tabrep {

namespace {

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw ContractError("double formatting failed");
  return std::string(buf, ptr);
}

}  // namespace

std::string_view to_string(RunMode mode) {
  switch (mode) {
    case RunMode::SingleTable: return "single";
    case RunMode::CrossTable: return "cross";
    case RunMode::Transfer: return "transfer";
  }
  return "single";
}

RunMode run_mode_from_string(std::string_view s) {
  if (s == "single") return RunMode::SingleTable;
  if (s == "cross") return RunMode::CrossTable;
  if (s == "transfer") return RunMode::Transfer;
  throw ConfigError("unknown run mode '" + std::string(s) + "'");
}

void RunConfig::validate() const {
  backbone.validate();
  if (batch_size == 0) throw ConfigError("config: batch_size must be positive");
  if (total_samples == 0) throw ConfigError("config: total_samples must be positive");
  if (!(mask_p >= 0.0 && mask_p <= 1.0)) throw ConfigError("config: mask_p outside [0, 1]");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
    throw ConfigError("config: warmup_fraction outside [0, 1)");
  if (lr_init < 0 || lr_peak < 0 || lr_final < 0 || weight_decay < 0)
    throw ConfigError("config: rates must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
    throw ConfigError("config: betas outside [0, 1)");
  if (eps <= 0) throw ConfigError("config: eps must be positive");
  if (freeze_backbone && mode != RunMode::Transfer)
    throw ConfigError("config: freeze_backbone applies to transfer mode only");
}

void apply_training_preset(RunConfig& config) {
  struct Preset {
    RunMode mode;
    const char* model;
    std::size_t batch;
    std::uint64_t samples;
  };
  static const Preset presets[] = {
      {RunMode::SingleTable, "S", 2048, 5'000'000},
      {RunMode::SingleTable, "M", 2048, 10'000'000},
      {RunMode::SingleTable, "L", 2048, 25'000'000},
      {RunMode::CrossTable, "M", 512, 75'000'000},
      {RunMode::CrossTable, "L", 512, 75'000'000},
      {RunMode::CrossTable, "XL", 256, 75'000'000},
  };
  for (const auto& preset : presets) {
    if (preset.mode == config.mode && config.model_preset == preset.model) {
      config.batch_size = preset.batch;
      config.total_samples = preset.samples;
      return;
    }
  }
  throw ConfigError("no training preset for model '" + config.model_preset + "' in mode '" +
                    std::string(to_string(config.mode)) +
                    "'; set batch_size and total_samples explicitly");
}

double lr_at(std::uint64_t samples_seen, std::uint64_t total_samples, const RunConfig& config) {
  if (total_samples == 0) throw ConfigError("lr_at: total_samples is zero");
  if (samples_seen > total_samples) throw ContractError("lr_at: samples_seen past total");
  const double t = static_cast<double>(samples_seen) / static_cast<double>(total_samples);
  const double wf = config.warmup_fraction;
  if (t <= wf) {
    const double u = (wf == 0.0) ? 1.0 : t / wf;
    return config.lr_init * (1.0 - u) + config.lr_peak * u;
  }
  if (samples_seen == total_samples) return config.lr_final;
  const double s = (t - wf) / (1.0 - wf);
  return config.lr_final +
         (config.lr_peak - config.lr_final) * 0.5 * (1.0 + std::cos(M_PI * s));
}

void adamw_step(Model<float>& model, const Model<float>& grads, OptimizerState& opt, double lr,
                const RunConfig& config) {
  const auto grad_refs = grads.tensors();
  for (const auto& ref : grad_refs) {
    for (std::int64_t i = 0; i < ref.size(); ++i) {
      if (!std::isfinite(static_cast<double>(ref.data[i])))
        throw NumericsError("adamw: non-finite gradient in tensor '" + ref.name + "'");
    }
  }

  opt.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(opt.step));

  auto param_refs = model.tensors();
  auto m_refs = opt.m.tensors();
  auto v_refs = opt.v.tensors();
  for (std::size_t t = 0; t < param_refs.size(); ++t) {
    auto& param = param_refs[t];
    if (config.freeze_backbone && param.backbone) continue;
    const auto& grad = grad_refs[t];
    auto& m = m_refs[t];
    auto& v = v_refs[t];
    for (std::int64_t i = 0; i < param.size(); ++i) {
      const double g = static_cast<double>(grad.data[i]);
      const double m_new = config.beta1 * static_cast<double>(m.data[i]) + (1.0 - config.beta1) * g;
      const double v_new =
          config.beta2 * static_cast<double>(v.data[i]) + (1.0 - config.beta2) * g * g;
      m.data[i] = static_cast<float>(m_new);
      v.data[i] = static_cast<float>(v_new);
      const double m_hat = m_new / bc1;
      const double v_hat = v_new / bc2;
      double update = lr * m_hat / (std::sqrt(v_hat) + config.eps);
      if (param.decay) update += lr * config.weight_decay * static_cast<double>(param.data[i]);
      param.data[i] = static_cast<float>(static_cast<double>(param.data[i]) - update);
    }
  }
}

std::string format_metrics_row(const MetricsRecord& record) {
  std::string row;
  row += std::to_string(record.step);
  row += ',';
  row += std::to_string(record.tokens_seen);
  row += ',';
  row += format_double(record.lr);
  row += ',';
  row += format_double(record.loss);
  row += ',';
  row += format_double(record.imp_top1);
  row += ',';
  row += format_double(record.imp_top3);
  return row;
}

Trainer::Trainer(RunConfig config, Model<float> model, OptimizerState opt,
                 std::uint64_t vocab_hash)
    : config_(std::move(config)),
      model_(std::move(model)),
      opt_(std::move(opt)),
      vocab_hash_(vocab_hash) {
  config_.validate();
}

Trainer Trainer::fresh(const RunConfig& config, std::int64_t vocab_size,
                       std::uint64_t vocab_hash) {
  Rng init_rng(config.seed, streams::kInit);
  Model<float> model = Model<float>::init(config.backbone, vocab_size, init_rng);
  OptimizerState opt = OptimizerState::init(model);
  return Trainer(config, std::move(model), std::move(opt), vocab_hash);
}

void Trainer::restore_progress(std::uint64_t step, std::uint64_t samples_seen,
                               std::uint64_t tokens_seen) {
  step_ = step;
  samples_seen_ = samples_seen;
  tokens_seen_ = tokens_seen;
}

std::filesystem::path Trainer::save_checkpoint_dir(const TrainOutputs& out,
                                                   const std::string& name) const {
  const auto dir = out.out_dir / "checkpoints" / name;
  std::filesystem::create_directories(dir);
  CheckpointMeta meta;
  meta.run = config_;
  meta.vocab_hash = vocab_hash_;
  meta.vocab_size = model_.vocab_size;
  meta.step = step_;
  meta.samples_seen = samples_seen_;
  meta.tokens_seen = tokens_seen_;
  meta.has_optimizer = true;
  meta.opt_step = opt_.step;
  save_checkpoint(dir, model_, &opt_, meta);
  if (out.vocab) save_vocab(*out.vocab, dir / "vocab.json");
  if (out.tokenizers) {
    const auto tok_dir = dir / "tokenizers";
    std::filesystem::create_directories(tok_dir);
    for (const auto& tokenizer : *out.tokenizers)
      save_tokenizer(tokenizer, tok_dir / (tokenizer.table_id + ".json"));
  }
  return dir;
}

RunSummary Trainer::run(const std::vector<TokenizedTable>& corpus, const TrainOutputs& out,
                        std::uint64_t max_steps) {
  const bool to_disk = !out.out_dir.empty();
  std::ofstream metrics_file;
  if (to_disk) {
    std::filesystem::create_directories(out.out_dir);
    const auto metrics_path = out.out_dir / "metrics.csv";
    const bool fresh_file = !std::filesystem::exists(metrics_path) || step_ == 0;
    metrics_file.open(metrics_path, fresh_file ? std::ios::trunc : std::ios::app);
    if (!metrics_file) throw IoError("cannot open metrics log: " + metrics_path.string());
    if (fresh_file) metrics_file << kMetricsHeader << "\n";
  }

  Model<float> grads = Model<float>::zeros_like(model_);
  std::uint64_t saved_multiple =
      config_.checkpoint_every_tokens > 0 ? tokens_seen_ / config_.checkpoint_every_tokens : 0;

  RunSummary summary;
  while (samples_seen_ < config_.total_samples) {
    if (max_steps > 0 && summary.steps_run >= max_steps) break;
    const std::size_t this_batch = static_cast<std::size_t>(std::min<std::uint64_t>(
        config_.batch_size, config_.total_samples - samples_seen_));
    const double lr = lr_at(samples_seen_, config_.total_samples, config_);

    Rng batch_rng(config_.seed, streams::kBatch, step_);
    Rng mask_rng(config_.seed, streams::kMask, step_);
    Rng dropout_rng(config_.seed, streams::kDropout, step_);

    const RowBatch batch = sample_batch(corpus, this_batch, batch_rng);
    const MaskedBatch masked = mask_cells(batch, config_.mask_p, mask_rng);
    const PaddedBatch padded = pad_batch(masked);

    grads.set_zero();
    const StepStats stats = forward_backward(model_, padded, true, &dropout_rng, grads);
    if (!std::isfinite(stats.loss))
      throw NumericsError("pretrain: non-finite loss at step " + std::to_string(step_) +
                          "; last checkpoint retained");
    if (stats.any_masked) adamw_step(model_, grads, opt_, lr, config_);

    step_ += 1;
    samples_seen_ += this_batch;
    tokens_seen_ += count_training_tokens(padded);
    summary.steps_run += 1;

    MetricsRecord record{step_, tokens_seen_, lr, stats.loss, stats.top1, stats.top3};
    metrics_.push_back(record);
    if (to_disk) metrics_file << format_metrics_row(record) << "\n";

    if (to_disk && config_.checkpoint_every_tokens > 0) {
      const std::uint64_t multiple = tokens_seen_ / config_.checkpoint_every_tokens;
      if (multiple > saved_multiple) {
        saved_multiple = multiple;
        char name[32];
        std::snprintf(name, sizeof(name), "ckpt_tokens_%015llu",
                      static_cast<unsigned long long>(tokens_seen_));
        save_checkpoint_dir(out, name);
      }
    }
  }

  summary.completed = samples_seen_ >= config_.total_samples;
  summary.tokens_seen = tokens_seen_;
  summary.samples_seen = samples_seen_;
  if (to_disk) {
    metrics_file.flush();
    if (!metrics_file) throw IoError("metrics log write failed");
    if (summary.completed) summary.final_checkpoint = save_checkpoint_dir(out, "final");
  }
  return summary;
}

UnionVocabulary prepare_transfer(Model<float>& model, const UnionVocabulary& vocab,
                                 const TableTokenizer& new_tokenizer, std::uint64_t seed) {
  UnionVocabulary extended = extend_vocab_for_transfer(vocab, new_tokenizer);
  Rng init_rng(seed, streams::kTransferInit);
  model.extend_vocab(extended.total_size, init_rng);
  return extended;
}

}  // namespace tabrep
