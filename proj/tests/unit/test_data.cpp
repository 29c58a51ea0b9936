#include <doctest.h>

#include <Eigen/LU>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include "dannlab/data.hpp"
#include "dannlab/metrics.hpp"

using namespace dannlab;

namespace {

FeatureMatrix column(const std::vector<double>& values) {
  FeatureMatrix f;
  f.values.resize(static_cast<Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) {
    f.values(static_cast<Index>(i), 0) = values[i];
    f.ids.push_back("r" + std::to_string(i));
  }
  return f;
}

// Type-7 quantile straight from its definition, trimmed stats by brute force.
double quantile7(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1) * p;
  const auto j = static_cast<std::size_t>(h);
  if (j + 1 >= v.size()) return v.back();
  return v[j] + (h - static_cast<double>(j)) * (v[j + 1] - v[j]);
}

std::pair<double, double> trimmed_oracle(const std::vector<double>& v) {
  const double lo = quantile7(v, 0.05);
  const double hi = quantile7(v, 0.95);
  long double sum = 0;
  int n = 0;
  for (double x : v) {
    if (x >= lo && x <= hi) {
      sum += x;
      ++n;
    }
  }
  const long double mean = sum / n;
  long double sq = 0;
  for (double x : v) {
    if (x >= lo && x <= hi) sq += (x - mean) * (x - mean);
  }
  return {static_cast<double>(mean), static_cast<double>(std::sqrt(sq / n))};
}

SyntheticShiftSpec small_spec() {
  SyntheticShiftSpec spec;
  spec.n_source = 300;
  spec.n_target = 200;
  spec.latent_dim = 4;
  spec.feature_dim = 12;
  return spec;
}

}  // namespace

TEST_CASE("csv parsing") {
  std::istringstream in("id,f0,f1,label\na,1,2,0.5\nb,3,4,-1\nc,5,6,2.5\n");
  const CsvData data = read_csv(in, Domain::Source);
  REQUIRE(data.features.rows() == 3);
  CHECK(data.features.cols() == 2);
  CHECK(data.features.ids == std::vector<std::string>{"a", "b", "c"});
  CHECK(data.features.values(2, 1) == 6.0);
  REQUIRE(data.labels);
  CHECK((*data.labels)(1) == -1.0);
  CHECK(data.rejected.empty());

  std::istringstream unlabeled("id,f0\nx,1.5\n\ny,2\n");
  const CsvData pool = read_csv(unlabeled, Domain::Target);
  CHECK_FALSE(pool.labels);
  CHECK(pool.features.rows() == 2);
  CHECK(pool.features.domain == Domain::Target);
}

TEST_CASE("csv rejects malformed rows by line") {
  std::istringstream in("id,f0,f1,label\na,1,2,0\nb,oops,4,1\nc,5,nan,1\nd,7,8,x\ne,9,10,2\n");
  const CsvData data = read_csv(in, Domain::Source);
  CHECK(data.features.ids == std::vector<std::string>{"a", "e"});
  REQUIRE(data.rejected.size() == 3);
  CHECK(data.rejected[0].line == 3);
  CHECK(data.rejected[1].line == 4);
  CHECK(data.rejected[2].line == 5);

  std::istringstream ragged("id,f0,f1\na,1,2\nb,3\n");
  CHECK_THROWS_AS(read_csv(ragged, Domain::Source), ParseError);
  std::istringstream empty("");
  CHECK_THROWS_AS(read_csv(empty, Domain::Source), ParseError);
  std::istringstream no_id("name,f0\na,1\n");
  CHECK_THROWS_AS(read_csv(no_id, Domain::Source), ParseError);
  std::istringstream no_features("id,label\na,1\n");
  CHECK_THROWS_AS(read_csv(no_features, Domain::Source), ParseError);
  CHECK_THROWS_AS(load_csv("/nonexistent/file.csv", Domain::Source), ParseError);
}

TEST_CASE("csv round trip is bitwise") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1e3);
  FeatureMatrix f;
  f.values.resize(20, 3);
  Vector labels(20);
  for (Index i = 0; i < 20; ++i) {
    f.ids.push_back("s" + std::to_string(i));
    for (Index j = 0; j < 3; ++j) f.values(i, j) = n(rng) / 7.0;
    labels(i) = std::clamp(n(rng) / 1e3, -3.0, 3.0);
  }
  std::stringstream buffer;
  write_csv(buffer, f, &labels);
  const CsvData back = read_csv(buffer, Domain::Source);
  CHECK(back.features.ids == f.ids);
  CHECK(back.features.values == f.values);
  CHECK(*back.labels == labels);
}

TEST_CASE("labels outside the score range are rejected") {
  std::istringstream in("id,f0,label\na,1,0\nb,2,3.5\n");
  CHECK_THROWS_AS(to_labeled(read_csv(in, Domain::Source), Attribute::Arousal), InputError);
  std::istringstream unlabeled("id,f0\na,1\n");
  CHECK_THROWS_AS(to_labeled(read_csv(unlabeled, Domain::Source), Attribute::Arousal), InputError);
}

TEST_CASE("quantile interpolation") {
  const std::vector<double> v{1, 2, 3, 4, 5};
  CHECK(quantile_sorted(v, 0.0) == 1.0);
  CHECK(quantile_sorted(v, 1.0) == 5.0);
  CHECK(quantile_sorted(v, 0.5) == 3.0);
  CHECK(quantile_sorted(v, 0.05) == doctest::Approx(1.2));
  CHECK(quantile_sorted(v, 0.95) == doctest::Approx(4.8));
  CHECK_THROWS_AS(quantile_sorted(std::vector<double>{}, 0.5), InputError);
}

TEST_CASE("trimmed statistics ignore outliers") {
  std::vector<double> v;
  for (int i = 1; i <= 100; ++i) v.push_back(i);
  v.push_back(1e6);
  const auto stats = fit_normalization(column(v));
  const auto [mean, std] = trimmed_oracle(v);
  CHECK(std::abs(stats.mean(0) - mean) <= 1e-12);
  CHECK(std::abs(stats.std(0) - std) <= 1e-12);
  CHECK(stats.mean(0) < 100.0);

  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> size(2, 400);
  std::student_t_distribution<double> heavy(1.5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> w(static_cast<std::size_t>(size(rng)));
    for (double& x : w) x = heavy(rng);
    const auto s = fit_normalization(column(w));
    const auto [m, sd] = trimmed_oracle(w);
    REQUIRE(std::abs(s.mean(0) - m) <= 1e-12 * std::max(1.0, std::abs(m)));
    REQUIRE(std::abs(s.std(0) - std::max(sd, kStdFloor)) <= 1e-12 * std::max(1.0, sd));
  }
}

TEST_CASE("normalization edge cases") {
  const auto flat = fit_normalization(column({4, 4, 4, 4}));
  CHECK(flat.mean(0) == 4.0);
  CHECK(flat.std(0) == kStdFloor);

  std::vector<double> symmetric;
  for (int i = -50; i <= 50; ++i) symmetric.push_back(i * 0.25);
  CHECK(std::abs(fit_normalization(column(symmetric)).mean(0)) <= 1e-14);

  CHECK_THROWS_AS(fit_normalization(column({1})), InputError);

  FeatureMatrix two;
  two.values = Matrix::Ones(3, 2);
  two.ids = {"a", "b", "c"};
  CHECK_THROWS_AS(apply_normalization(two, flat), ShapeError);
}

TEST_CASE("clipping is strict at ten sigma") {
  NormalizationStats stats;
  stats.mean = Eigen::RowVectorXd::Constant(1, 0.0);
  stats.std = Eigen::RowVectorXd::Constant(1, 1.0);
  const auto out = apply_normalization(column({10.5, 9.9, -10.5, -9.9, 10.0, 3.0}), stats);
  CHECK(out.values(0, 0) == 0.0);
  CHECK(out.values(1, 0) == 9.9);
  CHECK(out.values(2, 0) == 0.0);
  CHECK(out.values(3, 0) == -9.9);
  CHECK(out.values(4, 0) == 10.0);
  CHECK(out.values(5, 0) == 3.0);
}

TEST_CASE("normalized values are bounded and the trimmed band is standardized") {
  std::mt19937_64 rng(3);
  std::student_t_distribution<double> heavy(1.2);
  FeatureMatrix f;
  f.values.resize(500, 4);
  for (Index i = 0; i < 500; ++i) {
    f.ids.push_back(std::to_string(i));
    for (Index j = 0; j < 4; ++j) f.values(i, j) = heavy(rng) * (j + 1) + 5.0 * j;
  }
  const auto stats = fit_normalization(f);
  const auto z = apply_normalization(f, stats);
  CHECK(z.values.cwiseAbs().maxCoeff() <= 10.0);
  for (Index j = 0; j < 4; ++j) {
    std::vector<double> raw(500);
    for (Index i = 0; i < 500; ++i) raw[static_cast<std::size_t>(i)] = f.values(i, j);
    const double lo = quantile7(raw, 0.05);
    const double hi = quantile7(raw, 0.95);
    double sum = 0, sq = 0;
    int n = 0;
    for (Index i = 0; i < 500; ++i) {
      if (f.values(i, j) >= lo && f.values(i, j) <= hi) {
        sum += z.values(i, j);
        sq += z.values(i, j) * z.values(i, j);
        ++n;
      }
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) <= 1e-10);
    CHECK(std::abs(std::sqrt(sq / n - mean * mean) - 1.0) <= 1e-10);
  }
}

TEST_CASE("shift generator structure") {
  SyntheticShiftSpec spec;
  const ShiftTask task = generate_shift_task(spec);
  CHECK(task.source.rows() == 4000);
  CHECK(task.target_labeled.rows() == 4000);
  CHECK(task.target_pool.rows() == 4000);
  CHECK(task.source.features.cols() == 64);
  CHECK(task.source.features.domain == Domain::Source);
  CHECK(task.target_pool.domain == Domain::Target);
  task.source.validate();
  task.target_labeled.validate();

  const Matrix& r = task.rotation;
  CHECK((r.transpose() * r - Matrix::Identity(64, 64)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(task.translation.norm() == doctest::Approx(2.0).epsilon(1e-12));

  // Principal angles between range(A) and range(RA).
  const Eigen::HouseholderQR<Matrix> qa(task.mixing);
  const Eigen::HouseholderQR<Matrix> qb(r * task.mixing);
  const Matrix ua = qa.householderQ() * Matrix::Identity(64, 8);
  const Matrix ub = qb.householderQ() * Matrix::Identity(64, 8);
  const Eigen::JacobiSVD<Matrix> svd(ua.transpose() * ub);
  for (Index i = 0; i < 8; ++i) {
    const double angle = std::acos(std::min(1.0, svd.singularValues()(i))) * 180.0 / std::numbers::pi;
    CHECK(angle == doctest::Approx(30.0).epsilon(1e-8));
  }
}

TEST_CASE("shift generator is deterministic and seed-sensitive") {
  const auto a = generate_shift_task(small_spec());
  const auto b = generate_shift_task(small_spec());
  CHECK(a.source.features.values == b.source.features.values);
  CHECK(a.target_labeled.scores == b.target_labeled.scores);
  CHECK(a.target_pool.values == b.target_pool.values);
  auto other = small_spec();
  other.seed = 18;
  CHECK(generate_shift_task(other).source.features.values != a.source.features.values);
  CHECK(a.target_pool.values != a.target_labeled.features.values);
}

TEST_CASE("labels follow the shared latent function in both domains") {
  const auto task = generate_shift_task(SyntheticShiftSpec{});
  const auto oracle = [&](const Matrix& latent) {
    std::vector<double> y(static_cast<std::size_t>(latent.rows()));
    for (Index i = 0; i < latent.rows(); ++i) {
      double arg = std::sin(std::numbers::pi * latent(i, 0));
      for (Index k = 0; k < latent.cols(); ++k) arg += task.label_weights(k) * latent(i, k);
      y[static_cast<std::size_t>(i)] = std::clamp(3.0 * std::tanh(arg), -3.0, 3.0);
    }
    return y;
  };
  const auto as_vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  CHECK(ccc(oracle(task.source_latent), as_vec(task.source.scores)) > 0.95);
  CHECK(ccc(oracle(task.target_latent), as_vec(task.target_labeled.scores)) > 0.95);
  CHECK(task.source_latent.minCoeff() >= -1.0);
  CHECK(task.source_latent.maxCoeff() <= 1.0);
}

TEST_CASE("zero shift gives matching domains") {
  SyntheticShiftSpec spec;
  spec.rotation_degrees = 0;
  spec.translation_norm = 0;
  const auto task = generate_shift_task(spec);
  CHECK(task.rotation == Matrix::Identity(64, 64));
  CHECK(task.translation.norm() == 0.0);
  const Eigen::RowVectorXd ms = task.source.features.values.colwise().mean();
  const Eigen::RowVectorXd mt = task.target_labeled.features.values.colwise().mean();
  CHECK((ms - mt).cwiseAbs().maxCoeff() < 0.05);

  SyntheticShiftSpec shifted;
  const auto moved = generate_shift_task(shifted);
  const Eigen::RowVectorXd gap = moved.source.features.values.colwise().mean() -
                                 moved.target_labeled.features.values.colwise().mean();
  CHECK(gap.norm() == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("shift generator rejects bad specs") {
  auto spec = small_spec();
  spec.feature_dim = 3;
  CHECK_THROWS_AS(generate_shift_task(spec), SpecError);
  spec = small_spec();
  spec.feature_dim = spec.latent_dim;
  CHECK_THROWS_AS(generate_shift_task(spec), SpecError);
  spec.rotation_degrees = 0;
  CHECK_NOTHROW(generate_shift_task(spec));
  spec = small_spec();
  spec.n_source = 1;
  CHECK_THROWS_AS(generate_shift_task(spec), SpecError);
  spec = small_spec();
  spec.translation = Vector::Ones(5);
  CHECK_THROWS_AS(generate_shift_task(spec), SpecError);
}

TEST_CASE("split partitions") {
  const std::vector<double> whole{1.0};
  const auto all = split_indices(37, whole, 1);
  REQUIRE(all.size() == 1);
  CHECK(all[0].size() == 37);

  const std::vector<double> halves{0.5, 0.5};
  const auto parts = split_indices(100, halves, 9);
  CHECK(parts[0].size() == 50);
  CHECK(parts[1].size() == 50);
  CHECK(split_indices(100, halves, 9) == parts);
  CHECK(split_indices(100, halves, 10) != parts);

  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> size(0, 500);
  const std::vector<double> three{0.7, 0.15, 0.15};
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = size(rng);
    const auto p = split_indices(n, three, static_cast<std::uint64_t>(trial));
    std::set<Index> seen;
    std::size_t total = 0;
    for (const auto& part : p) {
      total += part.size();
      seen.insert(part.begin(), part.end());
    }
    REQUIRE(total == static_cast<std::size_t>(n));
    REQUIRE(seen.size() == static_cast<std::size_t>(n));
    if (n > 0) REQUIRE(*seen.rbegin() == n - 1);
  }

  CHECK_THROWS_AS(split_indices(10, std::vector<double>{0.5, 0.4}, 1), InputError);
  CHECK_THROWS_AS(split_indices(10, std::vector<double>{}, 1), InputError);
  CHECK_THROWS_AS(split_indices(10, std::vector<double>{1.5, -0.5}, 1), InputError);
}

TEST_CASE("dataset split keeps rows aligned") {
  const auto task = generate_shift_task(small_spec());
  const std::vector<double> fractions{0.6, 0.4};
  const auto parts = split(task.source, fractions, 4);
  REQUIRE(parts.size() == 2);
  CHECK(parts[0].rows() + parts[1].rows() == 300);
  for (const auto& part : parts) {
    for (Index i = 0; i < part.rows(); ++i) {
      const auto& id = part.features.ids[static_cast<std::size_t>(i)];
      const Index row = std::stoi(id.substr(id.find('-') + 1));
      REQUIRE(part.scores(i) == task.source.scores(row));
      REQUIRE(part.features.values.row(i) == task.source.features.values.row(row));
    }
  }
}
