// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <string>

#include "tabrep/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Cross-table tabular representation learning: table-specific tokenizers, a shared "
               "Transformer backbone, and masked-cell-recovery pretraining"};
  app.require_subcommand(1);

  tabrep::FitTokenizerArgs fit_args;
  auto* fit = app.add_subcommand("fit-tokenizer",
                                 "Fit per-table tokenizers and build the union vocabulary");
  fit->add_option("--manifest", fit_args.manifest, "corpus manifest file")->required();
  fit->add_option("--out", fit_args.out_dir, "output directory")->required();
  fit->add_option("--quantiles", fit_args.quantiles, "quantile buckets per numerical column");
  fit->add_option("--cat-threshold", fit_args.cat_threshold,
                  "numeric columns with fewer uniques become categorical");
  fit->add_flag("--corpus-filters", fit_args.corpus_filters,
                "apply all corpus curation filters (rows, column range, categorical cardinality)");
  fit->add_flag("--filter-high-card-cats", fit_args.filter_high_card_cats,
                "drop categorical columns with more than 64 unique values");
  fit->add_flag("--filter-min-rows", fit_args.filter_min_rows,
                "reject tables with 1000 rows or fewer");
  fit->add_flag("--filter-column-range", fit_args.filter_column_range,
                "reject tables with fewer than 10 or more than 50 retained columns");
  fit->add_option("--pretrain-fraction", fit_args.pretrain_fraction,
                  "fraction of rows reserved for pretraining");
  fit->add_option("--seed", fit_args.seed, "split seed");
  fit->add_option("--missing-sentinel", fit_args.missing_sentinels,
                  "extra cell values treated as missing (repeatable)");

  tabrep::PretrainArgs pre_args;
  std::string pre_model, pre_mode, pre_out;
  std::uint64_t pre_seed = 0, pre_batch = 0, pre_samples = 0;
  auto* pre = app.add_subcommand("pretrain", "Self-supervised masked-cell pretraining");
  pre->add_option("--config", pre_args.config_file, "run config file")->required();
  auto* opt_model = pre->add_option("--model", pre_model, "backbone preset (S, M, L, XL)");
  auto* opt_mode = pre->add_option("--mode", pre_mode, "single or cross");
  auto* opt_out = pre->add_option("--out", pre_out, "output directory override");
  auto* opt_seed = pre->add_option("--seed", pre_seed, "seed override");
  auto* opt_batch = pre->add_option("--batch-size", pre_batch, "batch size override");
  auto* opt_samples = pre->add_option("--total-samples", pre_samples, "sample budget override");
  pre->add_flag("--resume", pre_args.resume, "continue from the latest checkpoint");
  pre->add_option("--max-steps", pre_args.max_steps,
                  "stop after this many steps this invocation (resume later)");

  tabrep::TransferArgs tr_args;
  auto* tr = app.add_subcommand("transfer", "Adapt a pretrained model to a new table");
  tr->add_option("--checkpoint", tr_args.checkpoint, "source checkpoint directory")->required();
  tr->add_option("--manifest", tr_args.manifest, "manifest containing the new table")->required();
  tr->add_option("--table", tr_args.table, "table id to transfer onto")->required();
  tr->add_option("--out", tr_args.out_dir, "output directory")->required();
  tr->add_flag("--freeze", tr_args.freeze, "freeze the backbone; train only the tokenizer");
  tr->add_option("--batch-size", tr_args.batch_size, "batch size");
  tr->add_option("--total-samples", tr_args.total_samples, "sample budget");
  tr->add_option("--seed", tr_args.seed, "seed (split + training)");
  tr->add_option("--quantiles", tr_args.quantiles, "quantile buckets");
  tr->add_option("--cat-threshold", tr_args.cat_threshold, "categorical threshold");
  tr->add_option("--missing-sentinel", tr_args.missing_sentinels,
                 "extra missing-value sentinels (repeatable)");
  tr->add_option("--max-steps", tr_args.max_steps, "stop after this many steps");

  tabrep::ProbeArgs probe_args;
  auto* probe = app.add_subcommand("probe", "Linear probing on frozen pooled features");
  probe->add_option("--model", probe_args.model_dir, "checkpoint directory")->required();
  probe->add_option("--manifest", probe_args.manifest, "corpus manifest")->required();
  probe->add_option("--table", probe_args.table, "table id")->required();
  probe->add_option("--folds", probe_args.folds, "cross-validation folds");
  probe->add_option("--seed", probe_args.seed, "fold seed");
  probe->add_flag("--baseline", probe_args.with_baseline,
                  "also fit the raw-feature linear baseline on the same folds");
  probe->add_flag("--imputation", probe_args.with_imputation,
                  "also report imputation accuracy on the eval split");
  probe->add_option("--out", probe_args.out_dir, "output directory (default: model dir)");

  tabrep::ImputeArgs imp_args;
  auto* imp = app.add_subcommand("impute", "Fill missing cells of a CSV with top-k predictions");
  imp->add_option("--model", imp_args.model_dir, "checkpoint directory")->required();
  imp->add_option("--csv", imp_args.csv, "input CSV with missing cells")->required();
  imp->add_option("--table", imp_args.table, "table id whose tokenizer to use")->required();
  imp->add_option("--k", imp_args.k, "candidates per cell");
  imp->add_option("--out", imp_args.out_dir, "output directory")->required();

  tabrep::ReportArgs rep_args;
  auto* rep = app.add_subcommand("report", "Aggregate per-checkpoint metrics into one CSV");
  rep->add_option("--run", rep_args.run_dir, "run directory (contains checkpoints/)")->required();
  rep->add_option("--out", rep_args.out_file, "output CSV (default: <run>/report.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fit) return tabrep::cmd_fit_tokenizer(fit_args);
    if (*pre) {
      if (*opt_model) pre_args.model = pre_model;
      if (*opt_mode) pre_args.mode = pre_mode;
      if (*opt_out) pre_args.out_dir = pre_out;
      if (*opt_seed) pre_args.seed = pre_seed;
      if (*opt_batch) pre_args.batch_size = pre_batch;
      if (*opt_samples) pre_args.total_samples = pre_samples;
      return tabrep::cmd_pretrain(pre_args);
    }
    if (*tr) return tabrep::cmd_transfer(tr_args);
    if (*probe) return tabrep::cmd_probe(probe_args);
    if (*imp) return tabrep::cmd_impute(imp_args);
    if (*rep) return tabrep::cmd_report(rep_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
