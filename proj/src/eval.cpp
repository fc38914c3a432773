// SPDX-License-Identifier: Apache-2.0
#include "tabrep/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "tabrep/batcher.hpp"
#include "tabrep/errors.hpp"
#include "tabrep/rng.hpp"
#include "tabrep/trainer.hpp"

namespace tabrep {

namespace {

constexpr std::size_t kEvalChunk = 512;

/// Minimize a smooth convex objective with L-BFGS (two-loop recursion, Armijo
/// backtracking). objective(w, grad) returns f(w) and fills grad.
template <typename Objective>
Eigen::VectorXd lbfgs_minimize(Objective&& objective, Eigen::VectorXd w, int max_iters,
                               double grad_tol) {
  constexpr int kHistory = 10;
  const auto n = w.size();
  std::vector<Eigen::VectorXd> s_hist, y_hist;
  std::vector<double> rho_hist;

  Eigen::VectorXd grad(n), new_grad(n);
  double f = objective(w, grad);

  for (int iter = 0; iter < max_iters; ++iter) {
    if (grad.norm() <= grad_tol) break;

    // Two-loop recursion for the search direction.
    Eigen::VectorXd q = grad;
    const int h = static_cast<int>(s_hist.size());
    std::vector<double> alpha(static_cast<std::size_t>(h));
    for (int i = h - 1; i >= 0; --i) {
      alpha[static_cast<std::size_t>(i)] =
          rho_hist[static_cast<std::size_t>(i)] * s_hist[static_cast<std::size_t>(i)].dot(q);
      q -= alpha[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)];
    }
    if (h > 0) {
      const auto& s = s_hist.back();
      const auto& y = y_hist.back();
      q *= s.dot(y) / y.squaredNorm();
    }
    for (int i = 0; i < h; ++i) {
      const double beta =
          rho_hist[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)].dot(q);
      q += (alpha[static_cast<std::size_t>(i)] - beta) * s_hist[static_cast<std::size_t>(i)];
    }
    Eigen::VectorXd direction = -q;

    double dir_deriv = grad.dot(direction);
    if (dir_deriv >= 0) {  // fall back to steepest descent
      direction = -grad;
      dir_deriv = -grad.squaredNorm();
    }

    double step = (h == 0) ? 1.0 / std::max(1.0, grad.norm()) : 1.0;
    const double c1 = 1e-4;
    double new_f = f;
    Eigen::VectorXd new_w;
    bool accepted = false;
    for (int bt = 0; bt < 40; ++bt) {
      new_w = w + step * direction;
      new_f = objective(new_w, new_grad);
      if (new_f <= f + c1 * step * dir_deriv) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // line search stalled; w is as good as it gets

    Eigen::VectorXd s = new_w - w;
    Eigen::VectorXd y = new_grad - grad;
    const double sy = s.dot(y);
    if (sy > 1e-12) {
      if (static_cast<int>(s_hist.size()) == kHistory) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
    }
    w = std::move(new_w);
    grad = new_grad;
    f = new_f;
  }
  return w;
}

struct LogisticModel {
  Eigen::MatrixXd weights;  // (d+1) x K, last row is the intercept
};

/// L2-regularized multinomial logistic regression; objective is
/// mean CE + (lambda / (2n)) * ||W||^2 with the intercept row unpenalized.
LogisticModel fit_logistic(const Eigen::MatrixXd& x, const std::vector<int>& y, int n_classes,
                           double lambda, int max_iters, double grad_tol) {
  const auto n = x.rows();
  const auto d = x.cols();
  const auto k = static_cast<Eigen::Index>(n_classes);

  auto objective = [&](const Eigen::VectorXd& w_flat, Eigen::VectorXd& grad_flat) -> double {
    const Eigen::Map<const Eigen::MatrixXd> w(w_flat.data(), d + 1, k);
    Eigen::Map<Eigen::MatrixXd> grad(grad_flat.data(), d + 1, k);
    grad.setZero();

    Eigen::MatrixXd scores = x * w.topRows(d);
    scores.rowwise() += w.row(d);

    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double row_max = scores.row(i).maxCoeff();
      Eigen::RowVectorXd p = (scores.row(i).array() - row_max).exp();
      const double denom = p.sum();
      p /= denom;
      loss -= std::log(std::max(p(y[static_cast<std::size_t>(i)]), 1e-300));
      p(y[static_cast<std::size_t>(i)]) -= 1.0;
      grad.topRows(d).noalias() += x.row(i).transpose() * p;
      grad.row(d) += p;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    loss *= inv_n;
    grad *= inv_n;
    loss += 0.5 * lambda * inv_n * w.topRows(d).squaredNorm();
    grad.topRows(d) += lambda * inv_n * w.topRows(d);
    return loss;
  };

  Eigen::VectorXd w0 = Eigen::VectorXd::Zero((d + 1) * k);
  const Eigen::VectorXd w = lbfgs_minimize(objective, std::move(w0), max_iters, grad_tol);
  LogisticModel model;
  model.weights = Eigen::Map<const Eigen::MatrixXd>(w.data(), d + 1, k);
  return model;
}

int logistic_predict(const LogisticModel& model, const Eigen::RowVectorXd& x) {
  const auto d = model.weights.rows() - 1;
  Eigen::RowVectorXd scores = x * model.weights.topRows(d) + model.weights.row(d);
  Eigen::Index best = 0;
  scores.maxCoeff(&best);
  return static_cast<int>(best);
}

struct RidgeModel {
  Eigen::VectorXd beta;  // d coefficients + intercept at the end
};

RidgeModel fit_ridge(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double alpha) {
  const auto n = x.rows();
  const auto d = x.cols();
  Eigen::MatrixXd a(n, d + 1);
  a.leftCols(d) = x;
  a.col(d).setOnes();
  Eigen::MatrixXd gram = a.transpose() * a;
  for (Eigen::Index i = 0; i < d; ++i) gram(i, i) += alpha;  // intercept unpenalized
  RidgeModel model;
  model.beta = gram.ldlt().solve(a.transpose() * y);
  return model;
}

double ridge_predict(const RidgeModel& model, const Eigen::RowVectorXd& x) {
  const auto d = model.beta.size() - 1;
  return x.dot(model.beta.head(d)) + model.beta(d);
}

double fold_mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double fold_stddev(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (const double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

/// Encode rows of one table into eval batches of bounded size (no masking of
/// real cells beyond the optional target cell).
std::vector<std::int64_t> encode_eval_rows(const RawTable& table,
                                           const std::vector<std::size_t>& rows,
                                           const TableTokenizer& tokenizer,
                                           const UnionVocabulary& vocab,
                                           std::optional<int> target_col) {
  const auto& ranges = vocab.find(tokenizer.table_id);
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
      throw DataError("eval: table '" + table.table_id + "' lacks column '" +
                      tokenizer.columns[tc].name + "'");
    col_of[tc] = found;
  }

  std::vector<std::int64_t> ids;
  ids.reserve(rows.size() * tokenizer.columns.size());
  for (const std::size_t r : rows) {
    for (std::size_t tc = 0; tc < tokenizer.columns.size(); ++tc) {
      if (target_col && static_cast<int>(tc) == *target_col) {
        ids.push_back(UnionVocabulary::kMaskId);
        continue;
      }
      const int local = tokenizer.columns[tc].encode(table.rows[r][col_of[tc]], tokenizer.missing);
      ids.push_back(ranges.columns[tc].offset + local);
    }
  }
  return ids;
}

}  // namespace

FeatureMatrix extract_features(const Model<float>& model, const RawTable& table,
                               const std::vector<std::size_t>& rows,
                               const TableTokenizer& tokenizer, const UnionVocabulary& vocab,
                               std::optional<int> target_col) {
  const std::size_t width = tokenizer.columns.size();
  const auto ids = encode_eval_rows(table, rows, tokenizer, vocab, target_col);

  FeatureMatrix out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), model.config.d_model);
  const std::vector<std::uint8_t> pad_flags(kEvalChunk * width, 0);

  for (std::size_t start = 0; start < rows.size(); start += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, rows.size() - start);
    const std::span<const std::int64_t> chunk_ids(ids.data() + start * width, count * width);
    const Mat<float> x0 = embed(model, chunk_ids);
    const Mat<float> encoded =
        encode(model, x0, count, width,
               std::span<const std::uint8_t>(pad_flags.data(), count * width), false, nullptr,
               static_cast<EncodeCache<float>*>(nullptr));
    const Mat<float> pooled = mean_pool(encoded, count, width,
                                        std::span<const std::uint8_t>(pad_flags.data(),
                                                                      count * width));
    for (std::size_t i = 0; i < count; ++i)
      out.features.row(static_cast<Eigen::Index>(start + i)) =
          pooled.col(static_cast<Eigen::Index>(i)).transpose();
  }

  if (target_col) {
    std::size_t raw_col = table.n_cols();
    const auto& name = tokenizer.columns[static_cast<std::size_t>(*target_col)].name;
    for (std::size_t c = 0; c < table.n_cols(); ++c) {
      if (table.column_names[c] == name) {
        raw_col = c;
        break;
      }
    }
    out.raw_targets.reserve(rows.size());
    for (const std::size_t r : rows) out.raw_targets.push_back(table.rows[r][raw_col]);
  }
  return out;
}

FeatureMatrix extract_features_cached(const Model<float>& model, const RawTable& table,
                                      const std::vector<std::size_t>& rows,
                                      const TableTokenizer& tokenizer,
                                      const UnionVocabulary& vocab, std::optional<int> target_col,
                                      const std::filesystem::path& cache_dir,
                                      std::uint64_t model_hash) {
  if (cache_dir.empty())
    return extract_features(model, table, rows, tokenizer, vocab, target_col);

  std::uint64_t key = model_hash;
  key = fnv1a_64(table.table_id.data(), table.table_id.size(), key);
  const std::uint64_t n = rows.size();
  const std::int64_t d = model.config.d_model;
  const int tc = target_col.value_or(-1);
  key = fnv1a_64(&n, sizeof(n), key);
  key = fnv1a_64(&d, sizeof(d), key);
  key = fnv1a_64(&tc, sizeof(tc), key);

  char name[64];
  std::snprintf(name, sizeof(name), "features_%016llx.bin",
                static_cast<unsigned long long>(key));
  const auto path = cache_dir / name;

  FeatureMatrix out;
  if (std::filesystem::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    std::uint64_t file_n = 0;
    std::int64_t file_d = 0;
    in.read(reinterpret_cast<char*>(&file_n), sizeof(file_n));
    in.read(reinterpret_cast<char*>(&file_d), sizeof(file_d));
    if (in && file_n == n && file_d == d) {
      out.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
      in.read(reinterpret_cast<char*>(out.features.data()),
              static_cast<std::streamsize>(n * static_cast<std::uint64_t>(d) * sizeof(float)));
      if (in) {
        if (target_col) {
          // Targets are cheap; re-read them from the table.
          std::size_t raw_col = table.n_cols();
          const auto& col_name = tokenizer.columns[static_cast<std::size_t>(*target_col)].name;
          for (std::size_t c = 0; c < table.n_cols(); ++c) {
            if (table.column_names[c] == col_name) {
              raw_col = c;
              break;
            }
          }
          out.raw_targets.reserve(rows.size());
          for (const std::size_t r : rows) out.raw_targets.push_back(table.rows[r][raw_col]);
        }
        return out;
      }
    }
  }

  out = extract_features(model, table, rows, tokenizer, vocab, target_col);
  std::filesystem::create_directories(cache_dir);
  std::ofstream file(path, std::ios::binary);
  if (file) {
    const std::uint64_t file_n = n;
    const std::int64_t file_d = d;
    file.write(reinterpret_cast<const char*>(&file_n), sizeof(file_n));
    file.write(reinterpret_cast<const char*>(&file_d), sizeof(file_d));
    file.write(reinterpret_cast<const char*>(out.features.data()),
               static_cast<std::streamsize>(n * static_cast<std::uint64_t>(d) * sizeof(float)));
  }
  return out;
}

ProbeTargets decode_targets(const std::vector<std::string>& raw, TaskKind task,
                            const MissingPolicy& missing) {
  ProbeTargets targets;
  targets.task = task;
  if (task == TaskKind::Regression) {
    targets.values.reserve(raw.size());
    for (const auto& value : raw) {
      const auto v = parse_finite(value);
      if (!v) throw DataError("probe: non-numeric regression target '" + value + "'");
      targets.values.push_back(*v);
    }
    return targets;
  }
  std::unordered_map<std::string, int> classes;
  targets.labels.reserve(raw.size());
  for (const auto& value : raw) {
    if (missing.is_missing(value)) throw DataError("probe: missing target value");
    const auto [it, inserted] = classes.emplace(value, static_cast<int>(classes.size()));
    targets.labels.push_back(it->second);
  }
  targets.n_classes = static_cast<int>(classes.size());
  if (targets.n_classes < 2) throw DataError("probe: target has a single class");
  return targets;
}

std::vector<std::vector<std::size_t>> make_folds(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("folds must be at least 2");
  if (n < static_cast<std::size_t>(folds) * 2)
    throw ConfigError("need at least 2 rows per fold");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed, streams::kFolds);
  rng.shuffle(order);

  std::vector<std::vector<std::size_t>> assignment(static_cast<std::size_t>(folds));
  const std::size_t base = n / static_cast<std::size_t>(folds);
  const std::size_t extra = n % static_cast<std::size_t>(folds);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < static_cast<std::size_t>(folds); ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    assignment[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                         order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  return assignment;
}

namespace {

/// Shared k-fold scoring loop over a prepared design matrix.
ProbeResult run_folds(const Eigen::MatrixXd& x, const ProbeTargets& targets, int folds,
                      std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(x.rows());

  auto train_folds_ok = [&](const std::vector<std::vector<std::size_t>>& assignment) {
    if (targets.task == TaskKind::Regression) return true;
    for (std::size_t f = 0; f < assignment.size(); ++f) {
      std::vector<bool> seen(static_cast<std::size_t>(targets.n_classes), false);
      int classes_seen = 0;
      for (std::size_t g = 0; g < assignment.size(); ++g) {
        if (g == f) continue;
        for (const std::size_t i : assignment[g]) {
          const auto label = static_cast<std::size_t>(targets.labels[i]);
          if (!seen[label]) {
            seen[label] = true;
            ++classes_seen;
          }
        }
      }
      if (classes_seen < 2) return false;
    }
    return true;
  };

  auto assignment = make_folds(n, folds, seed);
  if (!train_folds_ok(assignment)) {
    assignment = make_folds(n, folds, seed + 1);
    if (!train_folds_ok(assignment))
      throw DataError("probe: a train fold is single-class even after re-seeding");
  }

  ProbeResult result;
  result.task = targets.task;
  result.metric_name = targets.task == TaskKind::Regression ? "r2" : "accuracy";

  for (std::size_t f = 0; f < assignment.size(); ++f) {
    std::vector<std::size_t> train_idx;
    for (std::size_t g = 0; g < assignment.size(); ++g) {
      if (g == f) continue;
      train_idx.insert(train_idx.end(), assignment[g].begin(), assignment[g].end());
    }
    const auto& test_idx = assignment[f];

    Eigen::MatrixXd x_train(static_cast<Eigen::Index>(train_idx.size()), x.cols());
    for (std::size_t i = 0; i < train_idx.size(); ++i)
      x_train.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(train_idx[i]));

    if (targets.task == TaskKind::Regression) {
      Eigen::VectorXd y_train(static_cast<Eigen::Index>(train_idx.size()));
      for (std::size_t i = 0; i < train_idx.size(); ++i)
        y_train(static_cast<Eigen::Index>(i)) = targets.values[train_idx[i]];
      const RidgeModel model = fit_ridge(x_train, y_train, 1e-3);

      double ss_res = 0.0, mean_y = 0.0;
      for (const std::size_t i : test_idx) mean_y += targets.values[i];
      mean_y /= static_cast<double>(test_idx.size());
      double ss_tot = 0.0;
      for (const std::size_t i : test_idx) {
        const double pred = ridge_predict(model, x.row(static_cast<Eigen::Index>(i)));
        ss_res += (targets.values[i] - pred) * (targets.values[i] - pred);
        ss_tot += (targets.values[i] - mean_y) * (targets.values[i] - mean_y);
      }
      const double r2 = ss_tot > 1e-300 ? 1.0 - ss_res / ss_tot : (ss_res < 1e-12 ? 1.0 : 0.0);
      result.fold_scores.push_back(r2);
      result.fold_mse.push_back(ss_res / static_cast<double>(test_idx.size()));
    } else {
      std::vector<int> y_train(train_idx.size());
      for (std::size_t i = 0; i < train_idx.size(); ++i) y_train[i] = targets.labels[train_idx[i]];
      const LogisticModel model =
          fit_logistic(x_train, y_train, targets.n_classes, 1.0, 1000, 1e-6);

      std::size_t correct = 0;
      for (const std::size_t i : test_idx) {
        if (logistic_predict(model, x.row(static_cast<Eigen::Index>(i))) == targets.labels[i])
          ++correct;
      }
      result.fold_scores.push_back(static_cast<double>(correct) /
                                   static_cast<double>(test_idx.size()));
    }
  }

  result.mean = fold_mean(result.fold_scores);
  result.stddev = fold_stddev(result.fold_scores, result.mean);
  return result;
}

}  // namespace

ProbeResult linear_probe(const Eigen::MatrixXd& features, const ProbeTargets& targets, int folds,
                         std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (targets.task == TaskKind::Regression) {
    if (targets.values.size() != n) throw ContractError("probe: target/feature size mismatch");
  } else if (targets.labels.size() != n) {
    throw ContractError("probe: target/feature size mismatch");
  }
  if (!features.allFinite()) throw DataError("probe: non-finite features");
  return run_folds(features, targets, folds, seed);
}

ProbeResult baseline_linear(const RawTable& table, const std::vector<std::size_t>& rows,
                            const TableSchema& schema, std::string_view target_column,
                            TaskKind task, int folds, std::uint64_t seed,
                            const MissingPolicy& missing) {
  // Collect raw targets and feature columns.
  std::size_t target_idx = table.n_cols();
  for (std::size_t c = 0; c < table.n_cols(); ++c) {
    if (table.column_names[c] == target_column) {
      target_idx = c;
      break;
    }
  }
  if (target_idx == table.n_cols())
    throw ConfigError("baseline: target column '" + std::string(target_column) + "' not found");

  std::vector<std::string> raw_targets;
  raw_targets.reserve(rows.size());
  for (const std::size_t r : rows) raw_targets.push_back(table.rows[r][target_idx]);
  const ProbeTargets targets = decode_targets(raw_targets, task, missing);

  const std::size_t n = rows.size();
  const auto assignment_probe = make_folds(n, folds, seed);  // same seed => same folds as probe

  // Build per-column descriptors from the schema (skip the target column).
  struct NumericColumn {
    std::size_t raw_col;
    std::vector<double> values;  // NaN when missing
  };
  struct CategoricalColumn {
    std::size_t raw_col;
    std::vector<int> codes;  // -1 when missing
    int n_categories = 0;
    Eigen::Index first_feature = 0;
  };
  std::vector<NumericColumn> numeric_cols;
  std::vector<CategoricalColumn> cat_cols;

  for (const auto& spec : schema.columns) {
    if (spec.name == target_column) continue;
    std::size_t raw_col = table.n_cols();
    for (std::size_t c = 0; c < table.n_cols(); ++c) {
      if (table.column_names[c] == spec.name) {
        raw_col = c;
        break;
      }
    }
    if (raw_col == table.n_cols())
      throw ContractError("baseline: schema column '" + spec.name + "' not in table");

    if (spec.kind == ColumnKind::Numerical) {
      NumericColumn col;
      col.raw_col = raw_col;
      col.values.reserve(n);
      for (const std::size_t r : rows) {
        const std::string& cell = table.rows[r][raw_col];
        if (missing.is_missing(cell)) {
          col.values.push_back(std::numeric_limits<double>::quiet_NaN());
        } else {
          const auto v = parse_finite(cell);
          if (!v)
            throw DataError("baseline: non-numeric value '" + cell + "' in column '" + spec.name +
                            "'");
          col.values.push_back(*v);
        }
      }
      numeric_cols.push_back(std::move(col));
    } else {
      CategoricalColumn col;
      col.raw_col = raw_col;
      std::unordered_map<std::string, int> categories;
      col.codes.reserve(n);
      for (const std::size_t r : rows) {
        const std::string& cell = table.rows[r][raw_col];
        if (missing.is_missing(cell)) {
          col.codes.push_back(-1);
          continue;
        }
        const auto [it, inserted] = categories.emplace(cell, static_cast<int>(categories.size()));
        col.codes.push_back(it->second);
      }
      col.n_categories = static_cast<int>(categories.size());
      if (col.n_categories > 0) cat_cols.push_back(std::move(col));
    }
  }

  Eigen::Index dims = static_cast<Eigen::Index>(numeric_cols.size());
  for (auto& col : cat_cols) {
    col.first_feature = dims;
    dims += col.n_categories;
  }
  if (dims == 0) throw DataError("baseline: no usable feature columns");

  // The design matrix is rebuilt per fold so standardization and imputation
  // use train-fold statistics only; run_folds gets the fold-specific matrix
  // through a per-fold preprocessing pass below.
  ProbeResult result;
  result.task = task;
  result.metric_name = task == TaskKind::Regression ? "r2" : "accuracy";

  for (std::size_t f = 0; f < assignment_probe.size(); ++f) {
    std::vector<std::size_t> train_idx;
    for (std::size_t g = 0; g < assignment_probe.size(); ++g) {
      if (g == f) continue;
      train_idx.insert(train_idx.end(), assignment_probe[g].begin(), assignment_probe[g].end());
    }
    const auto& test_idx = assignment_probe[f];

    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), dims);
    // Numericals: train-fold mean imputation + standardization.
    for (std::size_t c = 0; c < numeric_cols.size(); ++c) {
      const auto& col = numeric_cols[c];
      double sum = 0.0;
      std::size_t count = 0;
      for (const std::size_t i : train_idx) {
        if (!std::isnan(col.values[i])) {
          sum += col.values[i];
          ++count;
        }
      }
      const double mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
      double ss = 0.0;
      for (const std::size_t i : train_idx) {
        if (!std::isnan(col.values[i])) ss += (col.values[i] - mean) * (col.values[i] - mean);
      }
      const double stddev = count > 1 ? std::sqrt(ss / static_cast<double>(count - 1)) : 0.0;
      const double scale = stddev > 1e-12 ? 1.0 / stddev : 1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = std::isnan(col.values[i]) ? mean : col.values[i];
        x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = (v - mean) * scale;
      }
    }
    // Categoricals: train-fold mode imputation + one-hot.
    for (const auto& col : cat_cols) {
      std::vector<std::size_t> counts(static_cast<std::size_t>(col.n_categories), 0);
      for (const std::size_t i : train_idx) {
        if (col.codes[i] >= 0) ++counts[static_cast<std::size_t>(col.codes[i])];
      }
      int mode = 0;
      for (int k = 1; k < col.n_categories; ++k) {
        if (counts[static_cast<std::size_t>(k)] > counts[static_cast<std::size_t>(mode)]) mode = k;
      }
      for (std::size_t i = 0; i < n; ++i) {
        const int code = col.codes[i] >= 0 ? col.codes[i] : mode;
        x(static_cast<Eigen::Index>(i), col.first_feature + code) = 1.0;
      }
    }

    Eigen::MatrixXd x_train(static_cast<Eigen::Index>(train_idx.size()), dims);
    for (std::size_t i = 0; i < train_idx.size(); ++i)
      x_train.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(train_idx[i]));

    if (task == TaskKind::Regression) {
      Eigen::VectorXd y_train(static_cast<Eigen::Index>(train_idx.size()));
      for (std::size_t i = 0; i < train_idx.size(); ++i)
        y_train(static_cast<Eigen::Index>(i)) = targets.values[train_idx[i]];
      const RidgeModel model = fit_ridge(x_train, y_train, 1e-3);
      double ss_res = 0.0, mean_y = 0.0;
      for (const std::size_t i : test_idx) mean_y += targets.values[i];
      mean_y /= static_cast<double>(test_idx.size());
      double ss_tot = 0.0;
      for (const std::size_t i : test_idx) {
        const double pred = ridge_predict(model, x.row(static_cast<Eigen::Index>(i)));
        ss_res += (targets.values[i] - pred) * (targets.values[i] - pred);
        ss_tot += (targets.values[i] - mean_y) * (targets.values[i] - mean_y);
      }
      const double r2 = ss_tot > 1e-300 ? 1.0 - ss_res / ss_tot : (ss_res < 1e-12 ? 1.0 : 0.0);
      result.fold_scores.push_back(r2);
      result.fold_mse.push_back(ss_res / static_cast<double>(test_idx.size()));
    } else {
      std::vector<int> y_train(train_idx.size());
      for (std::size_t i = 0; i < train_idx.size(); ++i) y_train[i] = targets.labels[train_idx[i]];
      const LogisticModel model =
          fit_logistic(x_train, y_train, targets.n_classes, 1.0, 1000, 1e-6);
      std::size_t correct = 0;
      for (const std::size_t i : test_idx) {
        if (logistic_predict(model, x.row(static_cast<Eigen::Index>(i))) == targets.labels[i])
          ++correct;
      }
      result.fold_scores.push_back(static_cast<double>(correct) /
                                   static_cast<double>(test_idx.size()));
    }
  }

  result.mean = fold_mean(result.fold_scores);
  result.stddev = fold_stddev(result.fold_scores, result.mean);
  return result;
}

double ImputationAccuracy::at(int k) const {
  for (const auto& [key, value] : by_k) {
    if (key == k) return value;
  }
  throw ConfigError("imputation accuracy not computed for k=" + std::to_string(k));
}

std::vector<int> masked_cell_ranks(const Model<float>& model, const PaddedBatch& batch) {
  std::vector<int> ranks;
  ranks.reserve(batch.masked.size());
  if (batch.masked.empty()) return ranks;

  const Mat<float> x0 = embed(model, std::span<const std::int64_t>(batch.ids));
  const Mat<float> encoded =
      encode(model, x0, batch.batch_size, batch.width,
             std::span<const std::uint8_t>(batch.pad_flags), false, nullptr,
             static_cast<EncodeCache<float>*>(nullptr));

  std::vector<double> slice;
  for (const auto& cell : batch.masked) {
    const auto col = static_cast<Eigen::Index>(cell.elem * batch.width +
                                               static_cast<std::size_t>(cell.pos));
    const auto& range = cell.range;
    const std::int64_t local = cell.target - 2 - range.start;
    if (local < 0 || local >= range.length)
      throw ContractError("ranks: target outside its subspace");
    slice.resize(static_cast<std::size_t>(range.length));
    Eigen::Map<Eigen::VectorXd> slice_map(slice.data(), range.length);
    slice_map = (model.head_w.middleRows(range.start, range.length) * encoded.col(col) +
                 model.head_b.segment(range.start, range.length))
                    .cast<double>();
    int rank = 0;
    const double t = slice[static_cast<std::size_t>(local)];
    for (int i = 0; i < range.length; ++i) {
      const double v = slice[static_cast<std::size_t>(i)];
      if (v > t || (v == t && i < static_cast<int>(local))) ++rank;
    }
    ranks.push_back(rank);
  }
  return ranks;
}

ImputationAccuracy imputation_accuracy(const Model<float>& model, const RawTable& table,
                                       const std::vector<std::size_t>& rows,
                                       const TableTokenizer& tokenizer,
                                       const UnionVocabulary& vocab, double mask_p,
                                       std::span<const int> ks, std::uint64_t seed) {
  if (rows.empty()) throw ConfigError("imputation_accuracy: no rows");
  if (!(mask_p > 0.0 && mask_p <= 1.0))
    throw ConfigError("imputation_accuracy: mask_p outside (0, 1]");

  const TokenizedTable tokenized = tokenize_rows(tokenizer, vocab, table, rows);

  auto run_pass = [&](std::uint64_t pass_seed, std::vector<int>& ranks) {
    ranks.clear();
    Rng mask_rng(pass_seed, streams::kEvalMask);
    for (std::size_t start = 0; start < tokenized.n_rows; start += kEvalChunk) {
      const std::size_t count = std::min(kEvalChunk, tokenized.n_rows - start);
      RowBatch batch;
      batch.elems.reserve(count);
      for (std::size_t i = 0; i < count; ++i) {
        RowBatch::Element elem;
        elem.table = &tokenized;
        const auto row = tokenized.row(start + i);
        elem.ids.assign(row.begin(), row.end());
        batch.elems.push_back(std::move(elem));
      }
      const MaskedBatch masked = mask_cells(batch, mask_p, mask_rng);
      const PaddedBatch padded = pad_batch(masked);
      const auto chunk_ranks = masked_cell_ranks(model, padded);
      ranks.insert(ranks.end(), chunk_ranks.begin(), chunk_ranks.end());
    }
  };

  std::vector<int> ranks;
  run_pass(seed, ranks);
  if (ranks.empty()) {
    run_pass(seed + 1, ranks);
    if (ranks.empty()) throw DataError("imputation_accuracy: no cells masked after re-seeding");
  }

  ImputationAccuracy result;
  result.masked_cells = ranks.size();
  for (const int k : ks) {
    std::size_t hits = 0;
    for (const int rank : ranks) {
      if (rank < k) ++hits;
    }
    result.by_k.emplace_back(k, static_cast<double>(hits) / static_cast<double>(ranks.size()));
  }
  return result;
}

}  // namespace tabrep
