#include <doctest.h>

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>
#include <cmath>
#include <random>
#include <vector>

#include "dannlab/metrics.hpp"

using namespace dannlab;

namespace {

// Direct textbook formulas in long double, single pass over raw sums.
struct Oracle {
  long double rmse, pr, ccc;
};

Oracle oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = static_cast<long double>(x.size());
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0, se = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const long double a = x[i], b = y[i];
    sx += a;
    sy += b;
    sxx += a * a;
    syy += b * b;
    sxy += a * b;
    se += (a - b) * (a - b);
  }
  const long double mx = sx / n, my = sy / n;
  const long double vx = sxx / n - mx * mx;
  const long double vy = syy / n - my * my;
  const long double cov = sxy / n - mx * my;
  return {std::sqrt(se / n), cov / std::sqrt(vx * vy),
          2 * cov / (vx + vy + (mx - my) * (mx - my))};
}

std::vector<double> draw(std::mt19937_64& rng, std::size_t n, double loc, double scale) {
  std::normal_distribution<double> d(loc, scale);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

double welch_boost(const std::vector<double>& a, const std::vector<double>& b) {
  const auto stats = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size())};
  };
  const auto [ma, va] = stats(a);
  const auto [mb, vb] = stats(b);
  const double t = (ma - mb) / std::sqrt(va + vb);
  const double df = (va + vb) * (va + vb) /
                    (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
  return boost::math::cdf(boost::math::complement(boost::math::students_t(df), t));
}

}  // namespace

TEST_CASE("metrics match direct formulas on random pairs") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> size(2, 300);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = static_cast<std::size_t>(size(rng));
    const auto x = draw(rng, n, u(rng), 1.0 + u(rng) * 0.4);
    auto y = draw(rng, n, u(rng), 1.0 + u(rng) * 0.4);
    const double mix = u(rng) / 2;
    for (std::size_t i = 0; i < n; ++i) y[i] += mix * x[i];
    const Oracle o = oracle(x, y);
    const MetricTriple m = evaluate(x, y);
    REQUIRE(std::abs(m.rmse - static_cast<double>(o.rmse)) <= 1e-12);
    REQUIRE(std::abs(m.pr - static_cast<double>(o.pr)) <= 1e-12);
    REQUIRE(std::abs(m.ccc - static_cast<double>(o.ccc)) <= 1e-12);
  }
}

TEST_CASE("ccc properties") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto x = draw(rng, 50, u(rng), 0.5 + std::abs(u(rng)));
    const auto y = draw(rng, 50, u(rng), 0.5 + std::abs(u(rng)));
    CHECK(ccc(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(ccc(x, y)) <= std::abs(pearson(x, y)) + 1e-15);
    CHECK(ccc(x, y) == doctest::Approx(ccc(y, x)).epsilon(1e-14));
    CHECK(pearson(x, y) == doctest::Approx(pearson(y, x)).epsilon(1e-14));

    // Shifting a copy by c: ccc = 2 s^2 / (2 s^2 + c^2).
    const double c = u(rng);
    std::vector<double> shifted = x;
    for (double& v : shifted) v += c;
    double m = 0, s2 = 0;
    for (double v : x) m += v;
    m /= 50;
    for (double v : x) s2 += (v - m) * (v - m);
    s2 /= 50;
    CHECK(ccc(x, shifted) == doctest::Approx(2 * s2 / (2 * s2 + c * c)).epsilon(1e-12));
  }
}

TEST_CASE("degenerate inputs") {
  const std::vector<double> flat{2, 2, 2};
  const std::vector<double> other{1, 1, 1};
  const std::vector<double> ramp{1, 2, 3};
  CHECK(ccc(flat, flat) == 1.0);
  CHECK(ccc(flat, other) == 0.0);
  CHECK(ccc(flat, ramp) == 0.0);
  CHECK(pearson(flat, ramp) == 0.0);
  CHECK(rmse(flat, other) == 1.0);
  CHECK_THROWS_AS(rmse(flat, std::vector<double>{1, 2}), InputError);
  CHECK_THROWS_AS(rmse(std::vector<double>{}, std::vector<double>{}), InputError);
  CHECK_THROWS_AS(ccc(std::vector<double>{1}, std::vector<double>{1}), InputError);
}

TEST_CASE("domain accuracy") {
  Matrix p(4, 2);
  p << 0.9, 0.1, 0.5, 0.5, 0.2, 0.8, 0.6, 0.4;
  const std::vector<int> labels{0, 0, 1, 1};
  CHECK(domain_accuracy(p, labels) == 0.75);

  // Zero logits give uniform probabilities; ties go to class 0.
  const Matrix uniform = Matrix::Constant(6, 2, 0.5);
  CHECK(domain_accuracy(uniform, std::vector<int>{0, 0, 0, 1, 1, 1}) == 0.5);
  CHECK_THROWS_AS(domain_accuracy(uniform, std::vector<int>{0, 1}), InputError);
}

TEST_CASE("welch t-test against a frozen reference") {
  // Reference values from scipy.stats.ttest_ind(equal_var=False).
  const std::vector<double> a{1, 2, 3};
  const std::vector<double> b{0, 1, 2};
  CHECK(one_tailed_ttest(a, b) == doctest::Approx(0.1439320673633454).epsilon(1e-10));
  CHECK(one_tailed_ttest(b, a) == doctest::Approx(1 - 0.1439320673633454).epsilon(1e-10));

  const std::vector<double> c{0.1, 0.4, 0.35, 0.8, 0.62};
  const std::vector<double> d{0.2, 0.1, 0.3, 0.15};
  CHECK(one_tailed_ttest(c, d) == doctest::Approx(0.04513781332200307).epsilon(1e-10));
  CHECK(two_tailed_ttest(c, d) == doctest::Approx(0.09027562664400614).epsilon(1e-10));
}

TEST_CASE("welch t-test against boost students_t") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> size(2, 30);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 300; ++trial) {
    const auto a = draw(rng, static_cast<std::size_t>(size(rng)), u(rng), 0.2 + std::abs(u(rng)));
    const auto b = draw(rng, static_cast<std::size_t>(size(rng)), u(rng), 0.2 + std::abs(u(rng)));
    const double expected = welch_boost(a, b);
    CHECK(one_tailed_ttest(a, b) == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("t-test edge cases") {
  const std::vector<double> same{1, 1, 1};
  const std::vector<double> higher{2, 2, 2};
  CHECK(one_tailed_ttest(same, same) == 0.5);
  CHECK(one_tailed_ttest(higher, same) == 0.0);
  CHECK(one_tailed_ttest(same, higher) == 1.0);
  CHECK(two_tailed_ttest(same, same) == 1.0);
  CHECK_THROWS_AS(one_tailed_ttest(std::vector<double>{1}, same), InputError);
}

TEST_CASE("incomplete beta and student t tail") {
  CHECK(incomplete_beta(2.5, 0.5, 0.3) == doctest::Approx(0.018927124071945658).epsilon(1e-12));
  CHECK(incomplete_beta(10, 3, 0.9) == doctest::Approx(0.889130022255).epsilon(1e-10));
  for (double a : {0.5, 1.0, 3.7, 20.0}) {
    for (double b : {0.5, 2.0, 9.0}) {
      for (double x : {0.01, 0.2, 0.5, 0.77, 0.99}) {
        CHECK(incomplete_beta(a, b, x) == doctest::Approx(boost::math::ibeta(a, b, x)).epsilon(1e-11));
      }
    }
  }
  CHECK(incomplete_beta(2, 3, 0) == 0.0);
  CHECK(incomplete_beta(2, 3, 1) == 1.0);
  CHECK_THROWS_AS(incomplete_beta(-1, 2, 0.5), InputError);
  CHECK_THROWS_AS(incomplete_beta(1, 2, 1.5), InputError);

  for (double dof : {1.0, 4.0, 17.3, 200.0}) {
    for (double t : {-3.0, -0.4, 0.0, 1.1, 6.0}) {
      const double expected = boost::math::cdf(boost::math::complement(boost::math::students_t(dof), t));
      CHECK(student_t_upper_tail(t, dof) == doctest::Approx(expected).epsilon(1e-11));
    }
  }
  CHECK_THROWS_AS(student_t_upper_tail(1.0, 0.0), InputError);
}
