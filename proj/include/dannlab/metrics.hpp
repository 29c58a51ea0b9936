#pragma once

#include <span>
#include <vector>

#include "dannlab/types.hpp"

namespace dannlab {

struct MetricTriple {
  double rmse = 0.0;
  double pr = 0.0;
  double ccc = 0.0;
};

double rmse(std::span<const double> pred, std::span<const double> truth);

/// Pearson correlation. Returns 0 when either sequence is constant.
double pearson(std::span<const double> pred, std::span<const double> truth);

/// Concordance correlation coefficient with population (divide-by-n) moments:
///   2 rho sx sy / (sx^2 + sy^2 + (mx - my)^2)
/// Both constant and equal gives 1; any other constant input gives 0.
double ccc(std::span<const double> pred, std::span<const double> truth);

MetricTriple evaluate(std::span<const double> pred, std::span<const double> truth);

inline std::span<const double> as_span(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

/// Fraction of rows whose argmax equals the label; ties go to class 0.
double domain_accuracy(const Matrix& probabilities, std::span<const int> labels);

/// One-tailed Welch t-test for mean(a) > mean(b); returns the p-value.
double one_tailed_ttest(std::span<const double> a, std::span<const double> b);

/// Two-sided Welch t-test p-value, 2 min(p, 1 - p) of the one-tailed test.
double two_tailed_ttest(std::span<const double> a, std::span<const double> b);

/// Upper tail P(T > t) of Student's t with `dof` degrees of freedom.
double student_t_upper_tail(double t, double dof);

/// Regularized incomplete beta function I_x(a, b).
double incomplete_beta(double a, double b, double x);

}  // namespace dannlab
