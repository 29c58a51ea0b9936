#include "dannlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <Eigen/QR>

#include "dannlab/text.hpp"

namespace dannlab {

std::string to_string(Domain d) { return d == Domain::Source ? "source" : "target"; }

std::string to_string(Attribute a) {
  switch (a) {
    case Attribute::Arousal: return "arousal";
    case Attribute::Valence: return "valence";
    case Attribute::Dominance: return "dominance";
  }
  return "unknown";
}

Attribute parse_attribute(const std::string& text) {
  if (text == "arousal") return Attribute::Arousal;
  if (text == "valence") return Attribute::Valence;
  if (text == "dominance") return Attribute::Dominance;
  throw SpecError("unknown attribute '" + text + "'");
}

void FeatureMatrix::validate() const {
  if (static_cast<Index>(ids.size()) != values.rows()) {
    throw ShapeError("feature matrix has " + std::to_string(ids.size()) + " ids for " +
                     std::to_string(values.rows()) + " rows");
  }
  if (!values.allFinite()) throw InputError("feature matrix contains non-finite values");
}

FeatureMatrix FeatureMatrix::select(std::span<const Index> rows) const {
  FeatureMatrix out;
  out.domain = domain;
  out.values.resize(static_cast<Index>(rows.size()), values.cols());
  out.ids.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.values.row(static_cast<Index>(i)) = values.row(rows[i]);
    out.ids.push_back(ids.at(static_cast<std::size_t>(rows[i])));
  }
  return out;
}

void LabeledDataset::validate() const {
  features.validate();
  if (scores.size() != features.rows()) {
    throw ShapeError("dataset has " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(features.rows()) + " rows");
  }
  for (Index i = 0; i < scores.size(); ++i) {
    if (!(scores(i) >= kScoreMin && scores(i) <= kScoreMax)) {
      throw InputError("score of row " + features.ids[static_cast<std::size_t>(i)] +
                       " lies outside [-3, 3]");
    }
  }
}

LabeledDataset LabeledDataset::select(std::span<const Index> rows) const {
  LabeledDataset out;
  out.features = features.select(rows);
  out.attribute = attribute;
  out.scores.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out.scores(static_cast<Index>(i)) = scores(rows[i]);
  return out;
}

// ---------------------------------------------------------------------------
// CSV

CsvData read_csv(std::istream& in, Domain domain) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string_view> header;
  std::string header_line;
  while (std::getline(in, header_line)) {
    ++line_no;
    if (!trim(header_line).empty()) break;
  }
  if (trim(header_line).empty()) throw ParseError("csv: missing header row");
  header = split_fields(trim(header_line), ',');
  if (trim(header.front()) != "id") {
    throw ParseError("csv line " + std::to_string(line_no) + ": header must start with 'id'");
  }
  const bool has_label = header.size() >= 2 && trim(header.back()) == "label";
  const std::size_t n_fields = header.size();
  const std::size_t n_features = n_fields - 1 - (has_label ? 1 : 0);
  if (n_features == 0) throw ParseError("csv: header declares no feature columns");

  CsvData data;
  data.features.domain = domain;
  std::vector<double> values;
  std::vector<double> labels;
  std::vector<double> row(n_features);
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view text = trim(line);
    if (text.empty()) continue;
    const auto fields = split_fields(text, ',');
    if (fields.size() != n_fields) {
      throw ParseError("csv line " + std::to_string(line_no) + ": expected " +
                       std::to_string(n_fields) + " fields, found " +
                       std::to_string(fields.size()));
    }
    std::string reason;
    for (std::size_t j = 0; j < n_features && reason.empty(); ++j) {
      const auto v = parse_double(fields[j + 1]);
      if (!v) {
        reason = "non-numeric value in column " + std::string(trim(header[j + 1]));
      } else if (!std::isfinite(*v)) {
        reason = "non-finite value in column " + std::string(trim(header[j + 1]));
      } else {
        row[j] = *v;
      }
    }
    double label = 0.0;
    if (reason.empty() && has_label) {
      const auto v = parse_double(fields.back());
      if (!v || !std::isfinite(*v)) {
        reason = "invalid label";
      } else {
        label = *v;
      }
    }
    if (!reason.empty()) {
      data.rejected.push_back({line_no, reason});
      continue;
    }
    data.features.ids.emplace_back(trim(fields.front()));
    values.insert(values.end(), row.begin(), row.end());
    if (has_label) labels.push_back(label);
  }
  const auto n_rows = static_cast<Index>(data.features.ids.size());
  data.features.values =
      Eigen::Map<const Matrix>(values.data(), n_rows, static_cast<Index>(n_features));
  if (has_label) data.labels = Eigen::Map<const Vector>(labels.data(), n_rows);
  return data;
}

CsvData load_csv(const std::filesystem::path& path, Domain domain) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot read " + path.string());
  try {
    return read_csv(in, domain);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_csv(std::ostream& out, const FeatureMatrix& features, const Vector* labels) {
  out << "id";
  for (Index j = 0; j < features.cols(); ++j) out << ",f" << j;
  if (labels != nullptr) out << ",label";
  out << '\n';
  for (Index i = 0; i < features.rows(); ++i) {
    out << features.ids[static_cast<std::size_t>(i)];
    for (Index j = 0; j < features.cols(); ++j) out << ',' << format_double(features.values(i, j));
    if (labels != nullptr) out << ',' << format_double((*labels)(i));
    out << '\n';
  }
}

void save_csv(const std::filesystem::path& path, const FeatureMatrix& features,
              const Vector* labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_csv(out, features, labels);
  if (!out) throw Error("failed writing " + path.string());
}

LabeledDataset to_labeled(CsvData data, Attribute attribute) {
  if (!data.labels) throw InputError("csv has no label column");
  LabeledDataset out{std::move(data.features), attribute, std::move(*data.labels)};
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw InputError("quantile of an empty sequence");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

NormalizationStats fit_normalization(const FeatureMatrix& features) {
  if (features.rows() < 2) throw InputError("fit_normalization needs at least 2 rows");
  NormalizationStats stats;
  stats.domain = features.domain;
  stats.mean.resize(features.cols());
  stats.std.resize(features.cols());
  std::vector<double> column(static_cast<std::size_t>(features.rows()));
  for (Index j = 0; j < features.cols(); ++j) {
    for (Index i = 0; i < features.rows(); ++i) {
      column[static_cast<std::size_t>(i)] = features.values(i, j);
    }
    std::sort(column.begin(), column.end());
    const double lo = quantile_sorted(column, kLowerQuantile);
    const double hi = quantile_sorted(column, kUpperQuantile);
    double sum = 0.0;
    std::size_t count = 0;
    for (double v : column) {
      if (v >= lo && v <= hi) {
        sum += v;
        ++count;
      }
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (double v : column) {
      if (v >= lo && v <= hi) sq += (v - mean) * (v - mean);
    }
    stats.mean(j) = mean;
    stats.std(j) = std::max(std::sqrt(sq / static_cast<double>(count)), kStdFloor);
  }
  return stats;
}

FeatureMatrix apply_normalization(const FeatureMatrix& features, const NormalizationStats& stats) {
  if (stats.mean.size() != features.cols() || stats.std.size() != features.cols()) {
    throw ShapeError("normalization stats have " + std::to_string(stats.mean.size()) +
                     " columns, features have " + std::to_string(features.cols()));
  }
  FeatureMatrix out = features;
  for (Index i = 0; i < out.rows(); ++i) {
    for (Index j = 0; j < out.cols(); ++j) {
      const double z = (out.values(i, j) - stats.mean(j)) / stats.std(j);
      out.values(i, j) = std::abs(z) > kClipSigma ? 0.0 : z;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic shift

void SyntheticShiftSpec::validate() const {
  if (n_source < 2 || n_target < 2) throw SpecError("synthetic task needs at least 2 rows per domain");
  if (latent_dim < 1) throw SpecError("latent_dim must be positive");
  if (feature_dim < latent_dim) throw SpecError("feature_dim must be at least latent_dim");
  if (feature_dim == latent_dim && rotation_degrees != 0.0) {
    throw SpecError("rotation needs feature_dim > latent_dim");
  }
  if (!(noise_std >= 0.0)) throw SpecError("noise_std must be non-negative");
  if (translation.size() != 0 && translation.size() != feature_dim) {
    throw SpecError("translation must have feature_dim entries");
  }
}

double shift_label(const Vector& weights, const Eigen::Ref<const Eigen::RowVectorXd>& latent) {
  const double arg = latent.dot(weights.transpose()) + std::sin(std::numbers::pi * latent(0));
  return std::clamp(3.0 * std::tanh(arg), kScoreMin, kScoreMax);
}

namespace {

Vector gaussian_vector(Index n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal(rng);
  return v;
}

struct Draw {
  Matrix latent;
  Matrix features;
  Vector labels;
};

Draw draw_domain(const ShiftTask& task, const SyntheticShiftSpec& spec, Index n, bool shifted,
                 Rng& rng) {
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise_std > 0.0 ? spec.noise_std : 1.0);
  Draw d;
  d.latent.resize(n, spec.latent_dim);
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < spec.latent_dim; ++k) d.latent(i, k) = uniform(rng);
  }
  d.features = d.latent * task.mixing.transpose();
  if (shifted) {
    d.features = d.features * task.rotation.transpose();
    d.features.rowwise() += task.translation.transpose();
  }
  if (spec.noise_std > 0.0) {
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < spec.feature_dim; ++j) d.features(i, j) += noise(rng);
    }
  }
  d.labels.resize(n);
  for (Index i = 0; i < n; ++i) d.labels(i) = shift_label(task.label_weights, d.latent.row(i));
  return d;
}

std::vector<std::string> make_ids(const std::string& prefix, Index n) {
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    std::ostringstream os;
    os << prefix << '-' << i;
    ids.push_back(os.str());
  }
  return ids;
}

}  // namespace

ShiftTask generate_shift_task(const SyntheticShiftSpec& spec) {
  spec.validate();
  ShiftTask task;
  const Index d = spec.feature_dim;
  const Index k = spec.latent_dim;

  Rng structure = derive_rng(spec.seed, 100);
  std::normal_distribution<double> normal(0.0, 1.0);
  task.mixing.resize(d, k);
  const double mix_scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < k; ++j) task.mixing(i, j) = normal(structure) * mix_scale;
  }
  task.label_weights = gaussian_vector(k, structure) / std::sqrt(static_cast<double>(k));

  // Rotates the mixing range by the given angle toward a seeded subspace
  // orthogonal to it: every principal angle between the two ranges equals the
  // rotation angle.
  task.rotation = Matrix::Identity(d, d);
  Eigen::MatrixXd tilt(d, k);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < k; ++j) tilt(i, j) = normal(structure);
  }
  if (spec.rotation_degrees != 0.0) {
    const Index planes = std::min(k, d - k);
    Eigen::MatrixXd joint(d, k + planes);
    joint << task.mixing, tilt.leftCols(planes);
    const Eigen::MatrixXd basis = Eigen::HouseholderQR<Eigen::MatrixXd>(joint).householderQ() *
                                  Eigen::MatrixXd::Identity(d, k + planes);
    const Eigen::MatrixXd u = basis.leftCols(planes);
    const Eigen::MatrixXd v = basis.rightCols(planes);
    const double angle = spec.rotation_degrees * std::numbers::pi / 180.0;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    task.rotation += (c - 1.0) * (u * u.transpose() + v * v.transpose()) +
                     s * (v * u.transpose() - u * v.transpose());
  }
  if (spec.translation.size() == d) {
    task.translation = spec.translation;
  } else {
    const Vector direction = gaussian_vector(d, structure);
    task.translation = direction.normalized() * spec.translation_norm;
  }

  Rng source_rng = derive_rng(spec.seed, 101);
  Rng target_rng = derive_rng(spec.seed, 102);
  Rng pool_rng = derive_rng(spec.seed, 103);
  Draw src = draw_domain(task, spec, spec.n_source, false, source_rng);
  Draw tgt = draw_domain(task, spec, spec.n_target, true, target_rng);
  Draw pool = draw_domain(task, spec, spec.n_target, true, pool_rng);

  task.source.features = {make_ids("src", spec.n_source), std::move(src.features), Domain::Source};
  task.source.attribute = spec.attribute;
  task.source.scores = std::move(src.labels);
  task.source_latent = std::move(src.latent);

  task.target_labeled.features = {make_ids("tgt", spec.n_target), std::move(tgt.features),
                                  Domain::Target};
  task.target_labeled.attribute = spec.attribute;
  task.target_labeled.scores = std::move(tgt.labels);
  task.target_latent = std::move(tgt.latent);

  task.target_pool = {make_ids("pool", spec.n_target), std::move(pool.features), Domain::Target};
  return task;
}

// ---------------------------------------------------------------------------
// Partitioning

std::vector<std::vector<Index>> split_indices(Index n, std::span<const double> fractions,
                                              std::uint64_t seed) {
  if (fractions.empty()) throw InputError("split: no fractions given");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw InputError("split: fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InputError("split: fractions must sum to 1");

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng = derive_rng(seed, 200);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<Index>> parts;
  double cumulative = 0.0;
  Index start = 0;
  for (std::size_t p = 0; p < fractions.size(); ++p) {
    cumulative += fractions[p];
    const Index end = p + 1 == fractions.size()
                          ? n
                          : std::min(n, static_cast<Index>(std::llround(cumulative * static_cast<double>(n))));
    parts.emplace_back(order.begin() + start, order.begin() + std::max(start, end));
    start = std::max(start, end);
  }
  return parts;
}

}  // namespace dannlab
