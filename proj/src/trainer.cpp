#include "dannlab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <numeric>

namespace dannlab {

namespace {

// Per-trial random streams. Stream 1 and 2 seed parameter initialization.
constexpr std::uint64_t kTaskStream = 3;
constexpr std::uint64_t kDomainStream = 4;

std::vector<Index> shuffled(Index n, Rng& rng) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Matrix gather_rows(const Matrix& values, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), values.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = values.row(rows[i]);
  return out;
}

Vector gather(const Vector& values, std::span<const Index> rows) {
  Vector out(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Index>(i)) = values(rows[i]);
  return out;
}

std::vector<Parameter*> task_path_parameters(DannModel& model) {
  std::vector<Parameter*> params = model.feature_parameters();
  for (Parameter* p : model.task_parameters()) params.push_back(p);
  return params;
}

void evaluate_splits(DannModel& model, const Monitor& monitor, TrialReport& report) {
  for (const auto& [name, data] : monitor.eval) {
    const Vector pred = model.predict_task(data->features.values);
    report.splits.push_back({name, evaluate(as_span(pred), as_span(data->scores))});
  }
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// One epoch's batches: index ranges of `half` rows, the short tail kept only
// when batch norm can use it.
std::vector<std::pair<Index, Index>> batch_ranges(Index rows, Index half) {
  std::vector<std::pair<Index, Index>> ranges;
  for (Index start = 0; start < rows; start += half) {
    const Index count = std::min(half, rows - start);
    if (count < 2) break;
    ranges.emplace_back(start, count);
  }
  return ranges;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw SpecError("epochs must be non-negative");
  if (batch_size < 4 || batch_size % 2 != 0) {
    throw SpecError("batch_size must be even and at least 4");
  }
  if (!(learning_rate > 0.0)) throw SpecError("learning_rate must be positive");
  if (lambda_warmup_epochs < 0 || (epochs > 0 && lambda_warmup_epochs >= epochs)) {
    throw SpecError("lambda_warmup_epochs must be smaller than epochs");
  }
  if (!(lambda_final >= 0.0)) throw SpecError("lambda_final must be non-negative");
  if (trials < 1) throw SpecError("trials must be at least 1");
  if (workers < 1) throw SpecError("workers must be at least 1");
}

AdamConfig TrainConfig::adam() const {
  return {learning_rate, beta1, beta2, adam_epsilon, max_norm, clip_norm};
}

LambdaSchedule::LambdaSchedule(int warmup_epochs, int total_epochs, double final_value)
    : warmup_(warmup_epochs), total_(total_epochs), final_(final_value) {
  if (total_ < 1 || warmup_ < 0 || warmup_ >= total_) {
    throw InputError("lambda schedule needs 0 <= warmup < total epochs");
  }
  if (!(final_ >= 0.0)) throw InputError("lambda schedule final value must be non-negative");
}

LambdaSchedule LambdaSchedule::from(const TrainConfig& config) {
  return {config.lambda_warmup_epochs, config.epochs, config.lambda_final};
}

double LambdaSchedule::at(int epoch) const {
  if (epoch < 1 || epoch > total_) {
    throw InputError("epoch " + std::to_string(epoch) + " outside 1.." + std::to_string(total_));
  }
  if (epoch <= warmup_) return 0.0;
  return final_ * static_cast<double>(epoch - warmup_) / static_cast<double>(total_ - warmup_);
}

const MetricTriple& TrialReport::metrics(const std::string& split) const {
  for (const auto& s : splits) {
    if (s.split == split) return s.metrics;
  }
  throw InputError("trial report has no split '" + split + "'");
}

FeatureMatrix sample_unlabeled(const FeatureMatrix& pool, Index n_source, Rng& rng) {
  if (pool.rows() == 0) throw InputError("sample_unlabeled: empty pool");
  if (n_source < 0) throw InputError("sample_unlabeled: negative sample size");
  std::vector<Index> rows;
  if (pool.rows() >= n_source) {
    rows = shuffled(pool.rows(), rng);
    rows.resize(static_cast<std::size_t>(n_source));
  } else {
    std::uniform_int_distribution<Index> pick(0, pool.rows() - 1);
    rows.resize(static_cast<std::size_t>(n_source));
    for (Index& r : rows) r = pick(rng);
  }
  return pool.select(rows);
}

double domain_probe_accuracy(DannModel& model, const FeatureMatrix& source,
                             const FeatureMatrix& target) {
  if (source.rows() == 0 || source.rows() != target.rows()) {
    throw InputError("domain probe needs equal, non-zero source and target counts");
  }
  Matrix stacked(source.rows() + target.rows(), source.cols());
  stacked.topRows(source.rows()) = source.values;
  stacked.bottomRows(target.rows()) = target.values;
  std::vector<int> labels(static_cast<std::size_t>(stacked.rows()), 0);
  std::fill(labels.begin() + source.rows(), labels.end(), 1);
  return domain_accuracy(model.predict_domain(stacked), labels);
}

TrialReport train_dann(DannModel& model, const LabeledDataset& source,
                       const FeatureMatrix& target_pool, const TrainConfig& config,
                       std::uint64_t seed, const Monitor& monitor) {
  config.validate();
  if (source.rows() == 0) throw InputError("train_dann: empty source dataset");
  if (target_pool.rows() == 0) throw InputError("train_dann: empty target pool");
  if (!model.has_domain_head()) throw StateError("train_dann: model has no domain head");
  const auto start = std::chrono::steady_clock::now();

  TrialReport report;
  report.trial_seed = seed;
  Rng task_rng = derive_rng(seed, kTaskStream);
  Rng domain_rng = derive_rng(seed, kDomainStream);
  const FeatureMatrix unlabeled = sample_unlabeled(target_pool, source.rows(), domain_rng);

  Adam task_opt(task_path_parameters(model), config.adam());
  Adam domain_opt(model.domain_parameters(), config.adam());
  const Index half = config.batch_size / 2;
  const auto ranges = batch_ranges(source.rows(), half);

  try {
    if (config.epochs > 0) {
      const LambdaSchedule schedule = LambdaSchedule::from(config);
      for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const double lambda = schedule.at(epoch);
        model.gate().set_lambda(lambda);
        report.lambda_trace.push_back(lambda);

        const auto src_order = shuffled(source.rows(), task_rng);
        const auto tgt_order = shuffled(unlabeled.rows(), domain_rng);
        double loss_sum = 0.0;
        double acc_sum = 0.0;
        for (const auto& [first, count] : ranges) {
          const std::span<const Index> src_rows(src_order.data() + first, static_cast<std::size_t>(count));
          const std::span<const Index> tgt_rows(tgt_order.data() + first, static_cast<std::size_t>(count));
          if (monitor.on_batch) {
            monitor.on_batch("source", source.features, src_rows);
            monitor.on_batch("target", unlabeled, tgt_rows);
          }
          const Matrix xs = gather_rows(source.features.values, src_rows);
          const Vector ys = gather(source.scores, src_rows);
          const Matrix xt = gather_rows(unlabeled.values, tgt_rows);
          const StepStats stats = model.compute_gradients(xs, ys, &xt, task_rng, domain_rng);
          task_opt.step();
          domain_opt.step();
          loss_sum += stats.task_loss;
          acc_sum += stats.domain_accuracy;
        }
        const double batches = static_cast<double>(std::max<std::size_t>(ranges.size(), 1));
        report.task_loss.push_back(loss_sum / batches);
        if (monitor.probe_source != nullptr && monitor.probe_target != nullptr) {
          report.domain_accuracy.push_back(
              domain_probe_accuracy(model, *monitor.probe_source, *monitor.probe_target));
        } else {
          report.domain_accuracy.push_back(acc_sum / batches);
        }
      }
    }
    report.final_lambda = model.gate().lambda();
    evaluate_splits(model, monitor, report);
  } catch (const NumericError& e) {
    report.failed = true;
    report.failure = e.what();
  }
  report.wall_seconds = seconds_since(start);
  return report;
}

TrialReport train_baseline(DannModel& model, const LabeledDataset& train, const TrainConfig& config,
                           std::uint64_t seed, const Monitor& monitor) {
  config.validate();
  if (train.rows() == 0) throw InputError("train_baseline: empty training dataset");
  const auto start = std::chrono::steady_clock::now();

  TrialReport report;
  report.trial_seed = seed;
  Rng task_rng = derive_rng(seed, kTaskStream);
  Rng unused = derive_rng(seed, kDomainStream);
  Adam task_opt(task_path_parameters(model), config.adam());
  const Index half = config.batch_size / 2;
  const auto ranges = batch_ranges(train.rows(), half);

  try {
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
      const auto order = shuffled(train.rows(), task_rng);
      double loss_sum = 0.0;
      for (const auto& [first, count] : ranges) {
        const std::span<const Index> rows(order.data() + first, static_cast<std::size_t>(count));
        if (monitor.on_batch) monitor.on_batch("source", train.features, rows);
        const Matrix xs = gather_rows(train.features.values, rows);
        const Vector ys = gather(train.scores, rows);
        loss_sum += model.compute_gradients(xs, ys, nullptr, task_rng, unused).task_loss;
        task_opt.step();
      }
      report.task_loss.push_back(loss_sum / static_cast<double>(std::max<std::size_t>(ranges.size(), 1)));
      if (monitor.dev != nullptr) {
        const Vector pred = model.predict_task(monitor.dev->features.values);
        report.dev_ccc.push_back(ccc(as_span(pred), as_span(monitor.dev->scores)));
      }
    }
    evaluate_splits(model, monitor, report);
  } catch (const NumericError& e) {
    report.failed = true;
    report.failure = e.what();
  }
  report.wall_seconds = seconds_since(start);
  return report;
}

// ---------------------------------------------------------------------------
// Trials

std::vector<double> TrialSet::values(const std::string& split, const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : reports) {
    if (r.failed) continue;
    const MetricTriple& m = r.metrics(split);
    if (metric == "rmse") {
      out.push_back(m.rmse);
    } else if (metric == "pr") {
      out.push_back(m.pr);
    } else if (metric == "ccc") {
      out.push_back(m.ccc);
    } else {
      throw InputError("unknown metric '" + metric + "'");
    }
  }
  return out;
}

const MetricSummary& TrialSet::summary(const std::string& name) const {
  for (const auto& s : aggregate) {
    if (s.name == name) return s;
  }
  throw InputError("no aggregate named '" + name + "'");
}

std::vector<MetricSummary> aggregate(const std::vector<TrialReport>& reports) {
  std::vector<std::pair<std::string, std::vector<double>>> columns;
  const auto push = [&columns](const std::string& name, double v) {
    for (auto& [n, vals] : columns) {
      if (n == name) {
        vals.push_back(v);
        return;
      }
    }
    columns.push_back({name, {v}});
  };
  for (const auto& r : reports) {
    if (r.failed) continue;
    for (const auto& s : r.splits) {
      push(s.split + ".rmse", s.metrics.rmse);
      push(s.split + ".pr", s.metrics.pr);
      push(s.split + ".ccc", s.metrics.ccc);
    }
    if (!r.domain_accuracy.empty()) push("domain.accuracy", r.domain_accuracy.back());
  }
  std::vector<MetricSummary> out;
  for (const auto& [name, vals] : columns) {
    MetricSummary s;
    s.name = name;
    const double n = static_cast<double>(vals.size());
    s.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / n;
    double sq = 0.0;
    for (double v : vals) sq += (v - s.mean) * (v - s.mean);
    s.std = vals.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
    s.min = *std::min_element(vals.begin(), vals.end());
    s.max = *std::max_element(vals.begin(), vals.end());
    out.push_back(s);
  }
  return out;
}

TrialSet run_trials(const TrainConfig& config, const TrialFn& experiment) {
  config.validate();
  TrialSet set;
  set.reports.resize(static_cast<std::size_t>(config.trials));
  const auto run_one = [&](int t) {
    TrialReport r = experiment(t, config.seed + static_cast<std::uint64_t>(t));
    r.trial = t;
    r.trial_seed = config.seed + static_cast<std::uint64_t>(t);
    return r;
  };
  if (config.workers <= 1) {
    for (int t = 0; t < config.trials; ++t) set.reports[static_cast<std::size_t>(t)] = run_one(t);
  } else {
    for (int first = 0; first < config.trials; first += config.workers) {
      std::vector<std::future<TrialReport>> pending;
      const int last = std::min(config.trials, first + config.workers);
      for (int t = first; t < last; ++t) pending.push_back(std::async(std::launch::async, run_one, t));
      for (int t = first; t < last; ++t) {
        set.reports[static_cast<std::size_t>(t)] = pending[static_cast<std::size_t>(t - first)].get();
      }
    }
  }
  for (const auto& r : set.reports) set.failed += r.failed ? 1 : 0;
  set.aggregate = aggregate(set.reports);
  return set;
}

}  // namespace dannlab
