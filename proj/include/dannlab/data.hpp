#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dannlab/types.hpp"

namespace dannlab {

enum class Domain { Source, Target };
enum class Attribute { Arousal, Valence, Dominance };

std::string to_string(Domain d);
std::string to_string(Attribute a);
Attribute parse_attribute(const std::string& text);

inline constexpr double kScoreMin = -3.0;
inline constexpr double kScoreMax = 3.0;

struct FeatureMatrix {
  std::vector<std::string> ids;
  Matrix values;
  Domain domain = Domain::Source;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
  void validate() const;
  FeatureMatrix select(std::span<const Index> rows) const;
};

struct LabeledDataset {
  FeatureMatrix features;
  Attribute attribute = Attribute::Arousal;
  Vector scores;

  Index rows() const { return features.rows(); }
  void validate() const;
  LabeledDataset select(std::span<const Index> rows) const;
};

// ---------------------------------------------------------------------------
// CSV: header `id,f0,...,f{d-1}[,label]`, one sample per line.

struct RejectedRow {
  std::size_t line = 0;
  std::string reason;
};

struct CsvData {
  FeatureMatrix features;
  std::optional<Vector> labels;
  std::vector<RejectedRow> rejected;
};

CsvData read_csv(std::istream& in, Domain domain);
CsvData load_csv(const std::filesystem::path& path, Domain domain);

void write_csv(std::ostream& out, const FeatureMatrix& features, const Vector* labels = nullptr);
void save_csv(const std::filesystem::path& path, const FeatureMatrix& features,
              const Vector* labels = nullptr);

/// Builds a labeled dataset from parsed CSV; the file must carry a label column.
LabeledDataset to_labeled(CsvData data, Attribute attribute);

// ---------------------------------------------------------------------------
// Per-domain normalization

inline constexpr double kStdFloor = 1e-8;
inline constexpr double kClipSigma = 10.0;
inline constexpr double kLowerQuantile = 0.05;
inline constexpr double kUpperQuantile = 0.95;

struct NormalizationStats {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd std;
  Domain domain = Domain::Source;
};

/// Linear interpolation between order statistics of an ascending sequence.
double quantile_sorted(std::span<const double> sorted, double p);

/// Per column: mean and population std of the values inside the [5%, 95%]
/// quantile band; std floored at kStdFloor.
NormalizationStats fit_normalization(const FeatureMatrix& features);

/// z-scores every value, then zeroes any |z| > kClipSigma.
FeatureMatrix apply_normalization(const FeatureMatrix& features, const NormalizationStats& stats);

// ---------------------------------------------------------------------------
// Synthetic covariate shift

struct SyntheticShiftSpec {
  Index n_source = 4000;
  Index n_target = 4000;
  Index latent_dim = 8;
  Index feature_dim = 64;
  double rotation_degrees = 30.0;
  // Used as-is when it has feature_dim entries; otherwise a seeded direction
  // scaled to translation_norm.
  Vector translation;
  double translation_norm = 2.0;
  double noise_std = 0.05;
  std::uint64_t seed = 17;
  Attribute attribute = Attribute::Arousal;

  void validate() const;
};

struct ShiftTask {
  LabeledDataset source;
  LabeledDataset target_labeled;  // evaluation only
  FeatureMatrix target_pool;      // unlabeled, for adversarial training
  Matrix source_latent;
  Matrix target_latent;  // latents of target_labeled
  Matrix mixing;         // feature_dim x latent_dim
  Matrix rotation;       // feature_dim x feature_dim
  Vector translation;
  Vector label_weights;
};

/// Label of a latent vector: clamp(3 tanh(w.z + sin(pi z_1)), -3, 3).
double shift_label(const Vector& weights, const Eigen::Ref<const Eigen::RowVectorXd>& latent);

/// Latents uniform in [-1,1]^k, A with N(0, 1/d) entries. Source features
/// A z + noise; target features R A z + t + noise, where R turns the whole
/// range of A by the rotation angle toward a seeded orthogonal subspace.
/// target_labeled and target_pool are independent draws of n_target rows.
ShiftTask generate_shift_task(const SyntheticShiftSpec& spec);

// ---------------------------------------------------------------------------
// Partitioning

/// Disjoint, exhaustive, seed-deterministic partition of 0..n-1.
std::vector<std::vector<Index>> split_indices(Index n, std::span<const double> fractions,
                                              std::uint64_t seed);

template <typename Dataset>
std::vector<Dataset> split(const Dataset& data, std::span<const double> fractions,
                           std::uint64_t seed) {
  std::vector<Dataset> parts;
  for (const auto& rows : split_indices(data.rows(), fractions, seed)) {
    parts.push_back(data.select(rows));
  }
  return parts;
}

}  // namespace dannlab
