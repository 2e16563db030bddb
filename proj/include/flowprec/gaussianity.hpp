#ifndef FLOWPREC_GAUSSIANITY_HPP
#define FLOWPREC_GAUSSIANITY_HPP

#include "flowprec/common.hpp"

#include <limits>
#include <span>
#include <string>
#include <vector>

namespace flowprec::gaussianity {

/// Sentinel distance assigned to constant columns.
inline constexpr double kDegenerateDistance = std::numeric_limits<double>::infinity();

/// Per-dimension outcome of the approximate-Gaussianity heuristic.
struct GaussianityReport {
  std::vector<double> w2;           // distance of each standardized marginal to N(0, 1)
  double threshold = 0.0;           // C + sqrt(2 / n)
  double constant = 0.0;            // C
  std::size_t n = 0;                // samples per dimension
  std::vector<Index> gaussian_set;  // G, ascending
  std::vector<Index> complement_set;  // H, ascending
  std::vector<std::string> warnings;

  std::size_t dim() const { return w2.size(); }
  bool is_gaussian(Index k) const;
};

/// Empirical 2-Wasserstein distance between the standardized sample and the
/// standard normal, using the centred quantile grid (i - 0.5) / n.
///
/// Standardization uses the population (1/n) standard deviation, so the
/// result is invariant to positive affine maps of the input and bounded by
/// sqrt(2). Throws DegenerateInputError for n < 2 or zero variance.
double w2_to_standard_normal(std::span<const double> samples);

/// tau = C + sqrt(2 / n).
double gaussianity_threshold(double constant, std::size_t n);

/// Applies the distance test to every column of `samples` (rows = draws).
/// Constant columns are put in H with an infinite distance and a warning.
GaussianityReport classify_dimensions(const Matrix& samples, double constant);

/// Location, scale and shape terms of the squared W2 between two empirical
/// distributions. The terms sum to the squared W2 computed on the same
/// matched quantiles.
struct W2Decomposition {
  double location = 0.0;  // (mu_p - mu_q)^2
  double scale = 0.0;     // (sigma_p - sigma_q)^2
  double shape = 0.0;     // 2 sigma_p sigma_q (1 - rho)
  double total() const { return location + scale + shape; }
};

/// Quantiles are matched on the grid (i - 0.5) / m of the smaller sample
/// (size m); the larger sample contributes its empirical quantile at those
/// levels.
W2Decomposition w2_decomposition(std::span<const double> p, std::span<const double> q);

/// Squared empirical W2 between p and q on the same matched quantiles.
double squared_w2(std::span<const double> p, std::span<const double> q);

/// Test distributions used to calibrate C.
struct TestDistribution {
  std::string name;
  bool approximately_gaussian;
  std::function<double(Rng&)> draw;
};

/// Three approximately Gaussian laws followed by seven that are not.
std::vector<TestDistribution> calibration_suite();

/// Equal-weight mixture of N(-d/2, 1) and N(d/2, 1).
std::vector<double> sample_mixture(double distance, std::size_t n, Rng& rng);

}  // namespace flowprec::gaussianity

#endif  // FLOWPREC_GAUSSIANITY_HPP
