#ifndef FLOWPREC_MATH_HPP
#define FLOWPREC_MATH_HPP

#include "flowprec/common.hpp"

#include <cmath>
#include <numbers>

namespace flowprec {

inline constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

/// Standard normal quantile, Acklam's rational approximation
/// (absolute error below 1.5e-9 on (0, 1)).
double inverse_normal_cdf(double p);

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_log_pdf(double x, double mean, double sd) {
  const double r = (x - mean) / sd;
  return -0.5 * kLog2Pi - std::log(sd) - 0.5 * r * r;
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(sigmoid(x)) = -softplus(-x); also the log-derivative of softplus.
inline double log_sigmoid(double x) { return -softplus(-x); }

/// sigmoid(x) / softplus(x), finite for all x (tends to 1 as x -> -inf).
inline double sigmoid_over_softplus(double x) {
  if (x < -30.0) return 1.0 - 0.5 * std::exp(x);
  return sigmoid(x) / softplus(x);
}

/// Log density of a standard normal vector.
inline double standard_normal_log_density(const Eigen::Ref<const Vector>& z) {
  return -0.5 * (static_cast<double>(z.size()) * kLog2Pi + z.squaredNorm());
}

Vector standard_normal_vector(Rng& rng, Index n);

}  // namespace flowprec

#endif  // FLOWPREC_MATH_HPP
