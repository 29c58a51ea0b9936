#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dannlab/data.hpp"
#include "dannlab/metrics.hpp"
#include "dannlab/model.hpp"

namespace dannlab {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 256;  // source half + target half
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double max_norm = 4.0;
  double clip_norm = 10.0;
  int lambda_warmup_epochs = 10;
  double lambda_final = 1.0;
  int trials = 20;
  std::uint64_t seed = 17;
  // Trials run concurrently on this many workers; results keep trial order.
  int workers = 1;

  void validate() const;
  AdamConfig adam() const;
};

class LambdaSchedule {
 public:
  LambdaSchedule(int warmup_epochs, int total_epochs, double final_value);
  static LambdaSchedule from(const TrainConfig& config);

  /// 0 through the warmup, then linear up to final_value at total_epochs.
  /// Epochs are 1-based.
  double at(int epoch) const;

  int warmup_epochs() const { return warmup_; }
  int total_epochs() const { return total_; }
  double final_value() const { return final_; }

 private:
  int warmup_;
  int total_;
  double final_;
};

struct SplitMetrics {
  std::string split;
  MetricTriple metrics;
};

struct TrialReport {
  int trial = 0;
  std::uint64_t trial_seed = 0;
  std::vector<SplitMetrics> splits;
  std::vector<double> domain_accuracy;  // per epoch
  std::vector<double> lambda_trace;     // per epoch
  std::vector<double> dev_ccc;          // per epoch, baseline runs with a dev set
  std::vector<double> task_loss;        // per epoch, mean over batches
  double final_lambda = 0.0;
  double wall_seconds = 0.0;  // informational, never serialized
  bool failed = false;
  std::string failure;

  const MetricTriple& metrics(const std::string& split) const;
};

/// Named evaluation sets scored at the end of training, plus an optional
/// held-out balanced domain set probed after every epoch.
struct Monitor {
  using BatchObserver =
      std::function<void(const std::string& role, const FeatureMatrix& data, std::span<const Index> rows)>;

  std::vector<std::pair<std::string, const LabeledDataset*>> eval;
  const FeatureMatrix* probe_source = nullptr;
  const FeatureMatrix* probe_target = nullptr;
  const LabeledDataset* dev = nullptr;  // baseline only
  // Called with every training batch's rows, tagged "source" or "target".
  BatchObserver on_batch;
};

/// `n_source` rows drawn uniformly from `pool`: distinct rows when the pool is
/// large enough, otherwise with replacement.
FeatureMatrix sample_unlabeled(const FeatureMatrix& pool, Index n_source, Rng& rng);

/// Held-out domain accuracy of the model's domain head on a balanced set
/// (source rows labeled 0, target rows labeled 1).
double domain_probe_accuracy(DannModel& model, const FeatureMatrix& source,
                             const FeatureMatrix& target);

TrialReport train_dann(DannModel& model, const LabeledDataset& source,
                       const FeatureMatrix& target_pool, const TrainConfig& config,
                       std::uint64_t seed, const Monitor& monitor = {});

TrialReport train_baseline(DannModel& model, const LabeledDataset& train, const TrainConfig& config,
                           std::uint64_t seed, const Monitor& monitor = {});

struct MetricSummary {
  std::string name;  // "<split>.<metric>"
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single trial
  double min = 0.0;
  double max = 0.0;
};

struct TrialSet {
  std::vector<TrialReport> reports;
  std::vector<MetricSummary> aggregate;
  int failed = 0;

  /// Per-trial values of `<split>.<metric>` over successful trials.
  std::vector<double> values(const std::string& split, const std::string& metric) const;
  const MetricSummary& summary(const std::string& name) const;
};

using TrialFn = std::function<TrialReport(int trial, std::uint64_t seed)>;

/// Runs `config.trials` trials with seeds config.seed + t and aggregates the
/// successful ones.
TrialSet run_trials(const TrainConfig& config, const TrialFn& experiment);

std::vector<MetricSummary> aggregate(const std::vector<TrialReport>& reports);

}  // namespace dannlab
