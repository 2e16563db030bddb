#include "flowprec/gaussianity.hpp"

#include "flowprec/math.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flowprec::gaussianity {

namespace {

struct Moments {
  double mean;
  double sd;  // population
};

Moments moments(std::span<const double> x) {
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / n)};
}

void require_spread(std::span<const double> x, const char* what) {
  if (x.size() < 2) throw DegenerateInputError(std::string(what) + ": need at least 2 samples");
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  if (*lo == *hi) throw DegenerateInputError(std::string(what) + ": samples have zero variance");
}

// Sorted copies of p and q reduced to the common quantile grid of the
// smaller one.
std::pair<std::vector<double>, std::vector<double>> matched_quantiles(std::span<const double> p,
                                                                      std::span<const double> q) {
  std::vector<double> ps(p.begin(), p.end());
  std::vector<double> qs(q.begin(), q.end());
  std::sort(ps.begin(), ps.end());
  std::sort(qs.begin(), qs.end());
  auto reduce = [](const std::vector<double>& big, std::size_t m) {
    std::vector<double> out(m);
    const double n = static_cast<double>(big.size());
    for (std::size_t i = 0; i < m; ++i) {
      const double level = (static_cast<double>(i) + 0.5) / static_cast<double>(m);
      auto k = static_cast<std::size_t>(std::ceil(level * n));
      k = std::clamp<std::size_t>(k, 1, big.size());
      out[i] = big[k - 1];
    }
    return out;
  };
  if (ps.size() > qs.size()) ps = reduce(ps, qs.size());
  if (qs.size() > ps.size()) qs = reduce(qs, ps.size());
  return {std::move(ps), std::move(qs)};
}

}  // namespace

bool GaussianityReport::is_gaussian(Index k) const {
  return std::binary_search(gaussian_set.begin(), gaussian_set.end(), k);
}

double w2_to_standard_normal(std::span<const double> samples) {
  require_spread(samples, "w2_to_standard_normal");
  const auto [mean, sd] = moments(samples);
  std::vector<double> z(samples.size());
  std::transform(samples.begin(), samples.end(), z.begin(),
                 [&](double v) { return (v - mean) / sd; });
  std::sort(z.begin(), z.end());
  const double n = static_cast<double>(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double diff = z[i] - inverse_normal_cdf((static_cast<double>(i) + 0.5) / n);
    sum += diff * diff;
  }
  return std::sqrt(sum / n);
}

double gaussianity_threshold(double constant, std::size_t n) {
  if (n == 0) throw std::invalid_argument("gaussianity_threshold: n must be positive");
  return constant + std::sqrt(2.0 / static_cast<double>(n));
}

GaussianityReport classify_dimensions(const Matrix& samples, double constant) {
  if (samples.rows() < 2) throw DegenerateInputError("classify_dimensions: need at least 2 rows");
  GaussianityReport report;
  report.n = static_cast<std::size_t>(samples.rows());
  report.constant = constant;
  report.threshold = gaussianity_threshold(constant, report.n);
  report.w2.resize(static_cast<std::size_t>(samples.cols()));

  std::vector<double> column(report.n);
  for (Index k = 0; k < samples.cols(); ++k) {
    for (Index i = 0; i < samples.rows(); ++i) column[static_cast<std::size_t>(i)] = samples(i, k);
    const auto [lo, hi] = std::minmax_element(column.begin(), column.end());
    double d = kDegenerateDistance;
    if (!std::isfinite(*lo) || !std::isfinite(*hi)) {
      report.warnings.push_back("dimension " + std::to_string(k) + " has non-finite samples");
    } else if (*lo == *hi) {
      report.warnings.push_back("dimension " + std::to_string(k) + " is constant");
    } else {
      d = w2_to_standard_normal(column);
    }
    report.w2[static_cast<std::size_t>(k)] = d;
    (d <= report.threshold ? report.gaussian_set : report.complement_set).push_back(k);
  }
  for (const auto& w : report.warnings) warn("gaussianity: " + w);
  return report;
}

double squared_w2(std::span<const double> p, std::span<const double> q) {
  if (p.empty() || q.empty()) throw DegenerateInputError("squared_w2: empty sample");
  const auto [ps, qs] = matched_quantiles(p, q);
  double sum = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) sum += (ps[i] - qs[i]) * (ps[i] - qs[i]);
  return sum / static_cast<double>(ps.size());
}

W2Decomposition w2_decomposition(std::span<const double> p, std::span<const double> q) {
  require_spread(p, "w2_decomposition");
  require_spread(q, "w2_decomposition");
  const auto [ps, qs] = matched_quantiles(p, q);
  const auto mp = moments(ps);
  const auto mq = moments(qs);
  W2Decomposition out;
  out.location = (mp.mean - mq.mean) * (mp.mean - mq.mean);
  out.scale = (mp.sd - mq.sd) * (mp.sd - mq.sd);
  if (mp.sd == 0.0 || mq.sd == 0.0) return out;  // matched grid collapsed onto a single value
  double cov = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) cov += (ps[i] - mp.mean) * (qs[i] - mq.mean);
  cov /= static_cast<double>(ps.size());
  // 2 sd_p sd_q (1 - rho) = 2 (sd_p sd_q - cov)
  out.shape = 2.0 * (mp.sd * mq.sd - cov);
  return out;
}

std::vector<double> sample_mixture(double distance, std::size_t n, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> normal;
  std::vector<double> out(n);
  for (auto& v : out) {
    const double shift = coin(rng) ? distance / 2.0 : -distance / 2.0;
    v = shift + normal(rng);
  }
  return out;
}

std::vector<TestDistribution> calibration_suite() {
  auto normal = [](double mean, double sd) {
    return [=](Rng& rng) { return std::normal_distribution<double>(mean, sd)(rng); };
  };
  auto mixture = [](double m1, double s1, double m2, double s2) {
    return [=](Rng& rng) {
      const bool first = std::bernoulli_distribution(0.5)(rng);
      return first ? std::normal_distribution<double>(m1, s1)(rng)
                   : std::normal_distribution<double>(m2, s2)(rng);
    };
  };
  return {
      {"normal(0,1)", true, normal(0.0, 1.0)},
      {"normal(8,2^2)", true, normal(8.0, 2.0)},
      {"mixture(0.15,-0.15)", true, mixture(0.15, 1.0, -0.15, 1.0)},
      {"mixture(8,2^2;-8,1)", false, mixture(8.0, 2.0, -8.0, 1.0)},
      {"mixture(3,-3)", false, mixture(3.0, 1.0, -3.0, 1.0)},
      {"student_t(1.5)", false,
       [](Rng& rng) { return std::student_t_distribution<double>(1.5)(rng); }},
      {"cauchy(1.5,1.5)", false,
       [](Rng& rng) { return std::cauchy_distribution<double>(1.5, 1.5)(rng); }},
      {"gamma(1.5,1.5)", false,
       [](Rng& rng) { return std::gamma_distribution<double>(1.5, 1.0 / 1.5)(rng); }},
      {"funnel_conditional", false,
       [](Rng& rng) {
         const double y = std::normal_distribution<double>(0.0, 3.0)(rng);
         return std::normal_distribution<double>(0.0, std::exp(y / 2.0))(rng);
       }},
      {"banana_conditional", false,
       [](Rng& rng) {
         const double y = std::normal_distribution<double>(0.0, 10.0)(rng);
         return std::normal_distribution<double>(0.03 * y * y - 3.0, 1.0)(rng);
       }},
  };
}

}  // namespace flowprec::gaussianity
