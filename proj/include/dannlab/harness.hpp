#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dannlab/data.hpp"
#include "dannlab/trainer.hpp"

namespace dannlab {

enum class ExperimentKind { Sweep, Compare, Visualize };
enum class Normalize { PerDomain, None };

/// Flat `key = value` configuration with dotted section keys. Lines starting
/// with '#' are comments. Unknown keys are rejected.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Compare;
  Attribute attribute = Attribute::Arousal;
  std::string source_name = "synthetic";

  // Data: either synthetic or three CSV files.
  bool synthetic = true;
  SyntheticShiftSpec shift{};
  std::filesystem::path source_csv;
  std::filesystem::path target_csv;       // labeled target rows (target baseline + evaluation)
  std::filesystem::path target_pool_csv;  // unlabeled target rows
  std::optional<Normalize> normalize;     // default: per-domain for CSV, none for synthetic
  std::vector<double> source_split{0.7, 0.15, 0.15};  // train, dev, test
  std::vector<double> target_split{0.5, 0.25, 0.25};  // train, dev, test
  std::uint64_t split_seed = 7;

  NetworkSpec network{};  // input_dim is filled from the data
  std::vector<int> sweep_layers{1, 2, 3, 4};
  std::vector<Variant> structures{Variant::Deep, Variant::Shallow};
  int visualize_samples = 500;

  TrainConfig train{};
  std::filesystem::path out_dir = "out";

  static ExperimentConfig parse(std::istream& in);
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Applies one `key=value` assignment.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  /// Canonical text of every effective setting, sorted by key.
  std::string canonical() const;
  std::uint64_t hash() const;
  Normalize effective_normalize() const;
};

std::string to_string(ExperimentKind kind);

/// Everything an experiment trains and evaluates on, already normalized and split.
struct ExperimentData {
  LabeledDataset source_train;
  LabeledDataset source_dev;
  LabeledDataset source_test;
  LabeledDataset target_train;
  LabeledDataset target_dev;
  LabeledDataset target_test;
  FeatureMatrix target_pool;
  // Balanced, held out from every training set.
  FeatureMatrix probe_source;
  FeatureMatrix probe_target;
};

ExperimentData prepare_data(const ExperimentConfig& config);

struct TableRow {
  std::string source_name;
  std::string approach;  // target | src | dann
  std::string structure;
  int shared_layers = 0;
  int trials = 0;
  int failed = 0;
  MetricSummary rmse;
  MetricSummary pr;
  MetricSummary ccc;
  // One-tailed p-values of dann improving on src (dann rows only).
  std::optional<double> rmse_p;
  std::optional<double> pr_p;
  std::optional<double> ccc_p;

  bool significant(const std::optional<double>& p) const { return p && *p < 0.05; }
};

struct ComparisonTable {
  std::string attribute;
  std::vector<TableRow> rows;
  std::optional<int> best_layers;  // sweep only: argmax of mean dev CCC
  std::map<std::string, TrialSet> trial_sets;  // keyed "<structure>/<approach>"

  const TableRow& row(const std::string& approach, const std::string& structure) const;
};

struct RunHooks {
  // Sees every training batch as "<approach>/<role>". Called from worker
  // threads when train.workers > 1.
  Monitor::BatchObserver on_batch;
};

/// Significance decision shared by the compare table: one-tailed Welch test
/// of `better` over `worse` at p < 0.05.
bool significant_improvement(std::span<const double> better, std::span<const double> worse);

ComparisonTable run_sweep(const ExperimentConfig& config, const ExperimentData& data);
ComparisonTable run_compare(const ExperimentConfig& config, const ExperimentData& data,
                            const RunHooks& hooks = {});

struct Projection {
  Matrix points;  // n x 2
  std::vector<int> domain;  // 0 source, 1 target
};

/// Inference-mode activations of shared layer `layer` (1-based) for both
/// samples, projected onto the top two principal axes of the pooled activations.
Projection dump_representations(DannModel& model, const FeatureMatrix& source_sample,
                                const FeatureMatrix& target_sample, int layer);

Projection pca_project(const Matrix& activations, std::vector<int> domain);

/// Accuracy of assigning each projected point to the nearer domain centroid.
double nearest_centroid_separability(const Projection& projection);

/// Domain-head accuracy on a held-out balanced set; rejects unbalanced sets.
double domain_confusion_probe(DannModel& model, const FeatureMatrix& source,
                              const FeatureMatrix& target);

/// Trains a logistic-regression domain classifier on frozen shared-layer
/// activations (first half of each probe set) and returns its accuracy on the
/// second half.
double representation_probe_accuracy(DannModel& model, int layer, const FeatureMatrix& source,
                                      const FeatureMatrix& target, std::uint64_t seed);

struct VisualizeResult {
  std::vector<Projection> dann;  // one per shared layer
  std::vector<Projection> src;
  std::vector<double> dann_separability;
  std::vector<double> src_separability;
  double dann_domain_accuracy = 0.0;
  double src_probe_accuracy = 0.0;
};

VisualizeResult run_visualize(const ExperimentConfig& config, const ExperimentData& data);

// Output writers. Every number is printed in shortest round-trip form.
void write_table_csv(const std::filesystem::path& path, const ComparisonTable& table);
void write_trials_csv(const std::filesystem::path& path, const ComparisonTable& table);
void write_summary_json(const std::filesystem::path& path, const ComparisonTable& table,
                        const ExperimentConfig& config);
void write_summary_text(const std::filesystem::path& path, const ComparisonTable& table,
                        const ExperimentConfig& config);
void write_projection_csv(const std::filesystem::path& path, const Projection& projection);

/// Runs the configured experiment and writes its outputs under config.out_dir.
/// Returns the list of files written.
std::vector<std::filesystem::path> run_experiment(const ExperimentConfig& config);

/// Writes source.csv, target.csv and target_pool.csv for the synthetic spec.
std::vector<std::filesystem::path> export_synthetic(const ExperimentConfig& config);

}  // namespace dannlab
