#include "dannlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dannlab {

namespace {

struct Moments {
  double mean_x = 0.0;
  double mean_y = 0.0;
  double var_x = 0.0;
  double var_y = 0.0;
  double cov = 0.0;
};

void check_pair(std::span<const double> a, std::span<const double> b, std::size_t min_len,
                const char* what) {
  if (a.size() != b.size()) {
    throw InputError(std::string(what) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  if (a.size() < min_len) {
    throw InputError(std::string(what) + ": needs at least " + std::to_string(min_len) +
                     " values");
  }
}

// Population moments, two-pass.
Moments moments(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  Moments m;
  for (std::size_t i = 0; i < x.size(); ++i) {
    m.mean_x += x[i];
    m.mean_y += y[i];
  }
  m.mean_x /= n;
  m.mean_y /= n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - m.mean_x;
    const double dy = y[i] - m.mean_y;
    m.var_x += dx * dx;
    m.var_y += dy * dy;
    m.cov += dx * dy;
  }
  m.var_x /= n;
  m.var_y /= n;
  m.cov /= n;
  return m;
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_variance(std::span<const double> v, double mean) {
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size() - 1);
}

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete beta: continued fraction did not converge");
}

}  // namespace

double rmse(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred, truth, 1, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

double pearson(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred, truth, 2, "pearson");
  const Moments m = moments(pred, truth);
  if (m.var_x == 0.0 || m.var_y == 0.0) return 0.0;
  return m.cov / std::sqrt(m.var_x * m.var_y);
}

double ccc(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred, truth, 2, "ccc");
  const Moments m = moments(pred, truth);
  if (m.var_x == 0.0 || m.var_y == 0.0) {
    return (m.var_x == 0.0 && m.var_y == 0.0 && m.mean_x == m.mean_y) ? 1.0 : 0.0;
  }
  const double gap = m.mean_x - m.mean_y;
  return 2.0 * m.cov / (m.var_x + m.var_y + gap * gap);
}

MetricTriple evaluate(std::span<const double> pred, std::span<const double> truth) {
  return {rmse(pred, truth), pearson(pred, truth), ccc(pred, truth)};
}

double domain_accuracy(const Matrix& probabilities, std::span<const int> labels) {
  if (probabilities.rows() == 0) throw InputError("domain_accuracy: empty input");
  if (static_cast<std::size_t>(probabilities.rows()) != labels.size()) {
    throw InputError("domain_accuracy: rows and labels do not align");
  }
  Index correct = 0;
  for (Index i = 0; i < probabilities.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < probabilities.cols(); ++j) {
      if (probabilities(i, j) > probabilities(i, best)) best = j;
    }
    correct += best == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(probabilities.rows());
}

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw InputError("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw InputError("incomplete_beta: x must lie in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_upper_tail(double t, double dof) {
  if (!(dof > 0.0)) throw InputError("student_t_upper_tail: degrees of freedom must be positive");
  if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
  const double x = dof / (dof + t * t);
  const double half_two_sided = 0.5 * incomplete_beta(0.5 * dof, 0.5, x);
  return t >= 0.0 ? half_two_sided : 1.0 - half_two_sided;
}

double one_tailed_ttest(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw InputError("t-test: each sample needs at least 2 values");
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  const double va = sample_variance(a, ma) / na;
  const double vb = sample_variance(b, mb) / nb;
  const double se2 = va + vb;
  if (se2 == 0.0) {
    if (ma == mb) return 0.5;
    return ma > mb ? 0.0 : 1.0;
  }
  const double t = (ma - mb) / std::sqrt(se2);
  const double dof = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  return student_t_upper_tail(t, dof);
}

double two_tailed_ttest(std::span<const double> a, std::span<const double> b) {
  const double p = one_tailed_ttest(a, b);
  return std::min(1.0, 2.0 * std::min(p, 1.0 - p));
}

}  // namespace dannlab
