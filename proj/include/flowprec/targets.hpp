#ifndef FLOWPREC_TARGETS_HPP
#define FLOWPREC_TARGETS_HPP

#include "flowprec/common.hpp"
#include "flowprec/datasets.hpp"

#include <memory>
#include <string>

namespace flowprec::targets {

/// Unnormalized log-density on R^dim with an analytic gradient.
/// Implementations are immutable and safe to evaluate concurrently.
class TargetModel {
 public:
  virtual ~TargetModel() = default;

  virtual Index dim() const = 0;
  virtual std::string name() const = 0;

  /// Returns log pi(x); writes the gradient into `grad` when non-null.
  virtual double log_density(const Eigen::Ref<const Vector>& x, Vector* grad) const = 0;

  double log_density(const Eigen::Ref<const Vector>& x) const { return log_density(x, nullptr); }
  /// Score function, the gradient of log pi.
  Vector score(const Eigen::Ref<const Vector>& x) const;
  /// Maps the unconstrained point to model parameters (identity by default).
  virtual Vector constrain(const Eigen::Ref<const Vector>& x) const { return x; }
};

// Neal's funnel in 10 dimensions: x0 ~ N(0, 3^2), x_i | x0 ~ N(0, exp(x0)).
double funnel_log_density(const Eigen::Ref<const Vector>& x, Vector* grad);

// Banana in 100 dimensions: x0 ~ N(0, 10^2), x1 | x0 ~ N(0.03 x0^2 - 3, 1),
// the rest standard normal.
double banana_log_density(const Eigen::Ref<const Vector>& x, Vector* grad);

/// Sparse logistic regression posterior on unconstrained coordinates
/// (tau', lambda'[p], beta[p]) with tau = softplus(tau'), lambda =
/// softplus(lambda'). The funnelized variant appends log(sigma) and uses
/// beta ~ N(0, sigma^2 I), log(sigma) ~ N(0, 1).
double sgc_log_posterior(const Eigen::Ref<const Vector>& theta, const CreditDataset& data,
                         bool funnelized, Vector* grad);

enum class RadonVariant { VaryingSlopes, VaryingIntercepts, VaryingSlopesIntercepts };

RadonVariant parse_radon_variant(const std::string& id);  // "vs", "vi", "vsi"
std::string to_string(RadonVariant v);
Index radon_dim(RadonVariant v, int counties);

/// Hierarchical radon regression. Coordinates:
///   VS : log sigma_y, mu_a, log sigma_a, a[J], b
///   VI : log sigma_y, a, mu_b, log sigma_b, b[J]
///   VSI: log sigma_y, mu_a, log sigma_a, a[J], mu_b, log sigma_b, b[J]
/// Scales are sampled on the log scale, so their LogNormal(0, 1) priors are
/// exact N(0, 1) densities there.
double radon_log_posterior(const Eigen::Ref<const Vector>& theta, const RadonDataset& data,
                           RadonVariant variant, Vector* grad);

std::unique_ptr<TargetModel> make_funnel();
std::unique_ptr<TargetModel> make_banana();
std::unique_ptr<TargetModel> make_sgc(CreditDataset data, bool funnelized);
std::unique_ptr<TargetModel> make_radon(RadonDataset data, RadonVariant variant);

/// Gradient of `f` by central differences with step h * max(1, |x_i|).
Vector finite_difference_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                                  double h = 1e-6);

}  // namespace flowprec::targets

#endif  // FLOWPREC_TARGETS_HPP
