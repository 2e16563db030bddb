#include "flowprec/gaussianity.hpp"
#include "flowprec/math.hpp"
#include "flowprec/targets.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace flowprec;
using namespace flowprec::gaussianity;

namespace {

std::vector<double> draw(const std::function<double(Rng&)>& f, std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = f(rng);
  return v;
}

std::vector<double> normals(std::size_t n, Rng& rng) {
  return draw([](Rng& r) { return std::normal_distribution<double>()(r); }, n, rng);
}

}  // namespace

TEST_CASE("threshold values") {
  CHECK(gaussianity_threshold(0.1, 200) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(gaussianity_threshold(0.1, 100) == doctest::Approx(0.2414213562373095).epsilon(1e-12));
  double prev = gaussianity_threshold(0.0, 1);
  for (std::size_t n : {10, 100, 10000, 1000000}) {
    const double t = gaussianity_threshold(0.0, n);
    CHECK(t < prev);
    prev = t;
  }
  CHECK(prev < 2e-3);
  CHECK_THROWS(gaussianity_threshold(0.1, 0));
}

TEST_CASE("quantile-matched input leaves only the standardization drift") {
  // For x_i = Phi^-1((i - 0.5)/n) the distance after standardization is
  // |1 - sd(x)|; reference values from an independent scipy evaluation.
  for (auto [n, expected] : {std::pair<std::size_t, double>{10, 0.06203020475086196},
                             {1000, 0.0006505820049569344}}) {
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i)
      x[i] = inverse_normal_cdf((static_cast<double>(i) + 0.5) / static_cast<double>(n));
    CHECK(w2_to_standard_normal(x) == doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("distance is affine invariant and bounded") {
  Rng rng = make_rng(3);
  auto x = draw([](Rng& r) { return std::exponential_distribution<double>(1.0)(r); }, 500, rng);
  const double base = w2_to_standard_normal(x);
  for (auto [a, b] : {std::pair{2.0, 5.0}, {0.001, -3.0}, {1e4, 1e4}}) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = a * x[i] + b;
    CHECK(w2_to_standard_normal(y) == doctest::Approx(base).epsilon(1e-9));
  }
  // Extreme outlier: standardized W2 never exceeds sqrt(2).
  std::vector<double> spike(1000, 0.0);
  spike[0] = 1e9;
  CHECK(w2_to_standard_normal(spike) <= std::sqrt(2.0) + 1e-9);
  auto cauchy = draw([](Rng& r) { return std::cauchy_distribution<double>(0, 1)(r); }, 5000, rng);
  CHECK(w2_to_standard_normal(cauchy) <= std::sqrt(2.0) + 1e-9);
}

TEST_CASE("degenerate input") {
  CHECK_THROWS_AS(w2_to_standard_normal(std::vector<double>{1.0}), DegenerateInputError);
  CHECK_THROWS_AS(w2_to_standard_normal(std::vector<double>(10, 4.2)), DegenerateInputError);
}

TEST_CASE("Cauchy(1.5, 1.5) exceeds the threshold") {
  Rng rng = make_rng(4);
  auto x = draw([](Rng& r) { return std::cauchy_distribution<double>(1.5, 1.5)(r); }, 10000, rng);
  CHECK(w2_to_standard_normal(x) > gaussianity_threshold(0.1, 10000));
}

TEST_CASE("W2 of normal draws decays like n^-1/2") {
  Rng rng = make_rng(5);
  std::vector<double> lx, ly;
  for (std::size_t n : {100, 1000, 10000, 100000}) {
    double mean = 0.0;
    const int reps = 20;
    for (int r = 0; r < reps; ++r) mean += w2_to_standard_normal(normals(n, rng)) / reps;
    lx.push_back(std::log(static_cast<double>(n)));
    ly.push_back(std::log(mean));
  }
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / 4;
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / 4;
  double sxy = 0, sxx = 0;
  for (int i = 0; i < 4; ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  const double slope = sxy / sxx;
  CHECK(slope >= -0.7);
  CHECK(slope <= -0.3);
}

TEST_CASE("classification of known targets") {
  Rng rng = make_rng(6);
  SUBCASE("funnel: only x0 is Gaussian") {
    Matrix x(15000, 10);
    std::normal_distribution<double> n;
    for (Index i = 0; i < x.rows(); ++i) {
      x(i, 0) = 3.0 * n(rng);
      for (Index j = 1; j < 10; ++j) x(i, j) = std::exp(x(i, 0) / 2.0) * n(rng);
    }
    const auto r = classify_dimensions(x, 0.1);
    CHECK(r.gaussian_set == std::vector<Index>{0});
    CHECK(r.complement_set.size() == 9);
  }
  SUBCASE("banana: 99 Gaussian dimensions") {
    Matrix x = testutil::normal_matrix(15000, 100, rng);
    x.col(0) *= 10.0;
    x.col(1) = x.col(1).array() + 0.03 * x.col(0).array().square() - 3.0;
    const auto r = classify_dimensions(x, 0.1);
    CHECK(r.gaussian_set.size() == 99);
    CHECK(r.complement_set == std::vector<Index>{1});
  }
  SUBCASE("N(8, 2^2) in one dimension") {
    Matrix x = (testutil::normal_matrix(10000, 1, rng) * 2.0).array() + 8.0;
    CHECK(classify_dimensions(x, 0.1).gaussian_set == std::vector<Index>{0});
  }
  SUBCASE("mixture distance 2 passes, distance 10 does not") {
    Matrix x(10000, 2);
    auto a = sample_mixture(2.0, 10000, rng);
    auto b = sample_mixture(10.0, 10000, rng);
    for (Index i = 0; i < 10000; ++i) {
      x(i, 0) = a[static_cast<std::size_t>(i)];
      x(i, 1) = b[static_cast<std::size_t>(i)];
    }
    const auto r = classify_dimensions(x, 0.1);
    CHECK(r.is_gaussian(0));
    CHECK_FALSE(r.is_gaussian(1));
  }
}

TEST_CASE("report invariants and affine invariance") {
  Rng rng = make_rng(7);
  Matrix x = testutil::normal_matrix(2000, 6, rng);
  x.col(2) = x.col(2).array().exp();
  x.col(4) = x.col(4).array().cube();
  const auto r = classify_dimensions(x, 0.1);
  std::vector<Index> all = r.gaussian_set;
  all.insert(all.end(), r.complement_set.begin(), r.complement_set.end());
  std::sort(all.begin(), all.end());
  CHECK(all == std::vector<Index>{0, 1, 2, 3, 4, 5});
  for (Index k = 0; k < 6; ++k) {
    CHECK(r.is_gaussian(k) == (r.w2[static_cast<std::size_t>(k)] <= r.threshold));
    CHECK(r.w2[static_cast<std::size_t>(k)] >= 0.0);
    CHECK(r.w2[static_cast<std::size_t>(k)] <= std::sqrt(2.0) + 1e-9);
  }
  Matrix y = x;
  for (Index k = 0; k < 6; ++k) y.col(k) = y.col(k) * (0.5 + k) + Vector::Constant(2000, 3.0 * k);
  const auto r2 = classify_dimensions(y, 0.1);
  CHECK(r2.gaussian_set == r.gaussian_set);
  for (std::size_t k = 0; k < 6; ++k) CHECK(r2.w2[k] == doctest::Approx(r.w2[k]).epsilon(1e-9));
}

TEST_CASE("constant columns go to H with a sentinel and a warning") {
  Rng rng = make_rng(8);
  Matrix x = testutil::normal_matrix(500, 3, rng);
  x.col(1).setConstant(2.0);
  std::vector<std::string> seen;
  set_warning_sink([&](const std::string& m) { seen.push_back(m); });
  const auto r = classify_dimensions(x, 0.1);
  set_warning_sink(nullptr);
  CHECK(std::isinf(r.w2[1]));
  CHECK(std::find(r.complement_set.begin(), r.complement_set.end(), 1) != r.complement_set.end());
  CHECK(r.warnings.size() == 1);
  CHECK(seen.size() == 1);
  CHECK_THROWS(classify_dimensions(Matrix(1, 3), 0.1));
}

TEST_CASE("W2 decomposition") {
  Rng rng = make_rng(9);
  const auto p = normals(1000, rng);
  SUBCASE("self distance is zero") {
    const auto d = w2_decomposition(p, p);
    CHECK(d.location == 0.0);
    CHECK(d.scale == doctest::Approx(0.0).scale(1.0));
    CHECK(d.shape == doctest::Approx(0.0).scale(1.0));
  }
  SUBCASE("shift only moves the location term") {
    std::vector<double> q = p;
    for (auto& v : q) v += 3.0;
    const auto d = w2_decomposition(p, q);
    CHECK(d.location == doctest::Approx(9.0).epsilon(1e-12));
    CHECK(std::abs(d.scale) <= 1e-12);
    CHECK(std::abs(d.shape) <= 1e-10);
  }
  SUBCASE("standardized inputs keep the total at most 2") {
    auto q = draw([](Rng& r) { return std::exponential_distribution<double>(1.0)(r); }, 1000, rng);
    auto standardize = [](std::vector<double> v) {
      const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
      double s = 0;
      for (double x : v) s += (x - m) * (x - m);
      s = std::sqrt(s / v.size());
      for (auto& x : v) x = (x - m) / s;
      return v;
    };
    const auto d = w2_decomposition(standardize(p), standardize(q));
    CHECK(std::abs(d.location) <= 1e-20);
    CHECK(std::abs(d.scale) <= 1e-20);
    CHECK(d.total() <= 2.0);
  }
  SUBCASE("terms sum to the squared distance") {
    for (int rep = 0; rep < 20; ++rep) {
      auto a = draw([](Rng& r) { return std::gamma_distribution<double>(2.0, 3.0)(r); }, 300, rng);
      auto b = draw([](Rng& r) { return std::student_t_distribution<double>(3.0)(r); }, 300, rng);
      CHECK(std::abs(w2_decomposition(a, b).total() - squared_w2(a, b)) <= 1e-8);
    }
    // Unequal sizes are matched on the smaller grid.
    auto big = normals(5000, rng);
    CHECK(std::abs(w2_decomposition(p, big).total() - squared_w2(p, big)) <= 1e-8);
  }
  CHECK_THROWS_AS(w2_decomposition(std::vector<double>{1, 1, 1}, p), DegenerateInputError);
}

TEST_CASE("calibration suite at C = 0.1 and n = 10000") {
  Rng rng = make_rng(10);
  const auto suite = calibration_suite();
  REQUIRE(suite.size() == 10);
  const double tau = gaussianity_threshold(0.1, 10000);
  for (const auto& dist : suite) {
    CAPTURE(dist.name);
    const double w = w2_to_standard_normal(draw(dist.draw, 10000, rng));
    CHECK((w <= tau) == dist.approximately_gaussian);
  }
}
