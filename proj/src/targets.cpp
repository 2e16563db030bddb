#include "flowprec/targets.hpp"

#include "flowprec/math.hpp"

#include <cmath>
#include <stdexcept>

namespace flowprec::targets {

namespace {

constexpr double kFlatVariance = 1e10;  // (10^5)^2

// Gamma(0.5, 0.5) shape-rate prior on t = softplus(u), plus the log-Jacobian
// log softplus'(u). Returns the value and writes d/du.
double softplus_gamma_prior(double u, double& d_u) {
  constexpr double shape = 0.5;
  constexpr double rate = 0.5;
  const double t = softplus(u);
  const double log_t = u < -30.0 ? u - 0.5 * std::exp(u) : std::log(t);
  const double s = sigmoid(u);
  const double value = shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * log_t -
                       rate * t + log_sigmoid(u);
  d_u = (shape - 1.0) * sigmoid_over_softplus(u) - rate * s + (1.0 - s);
  return value;
}

// Accumulates log N(v_j | mu, exp(log_sd)^2) over a block and its gradient.
double hierarchical_block(const Eigen::Ref<const Vector>& theta, Index mu_at, Index log_sd_at,
                          Index block_at, Index count, Vector* grad) {
  const double mu = theta[mu_at];
  const double log_sd = theta[log_sd_at];
  const double inv_var = std::exp(-2.0 * log_sd);
  const Eigen::ArrayXd block = theta.segment(block_at, count).array() - mu;
  const double ss = block.square().sum();
  const double n = static_cast<double>(count);
  if (grad) {
    grad->segment(block_at, count).array() -= block * inv_var;
    (*grad)[mu_at] += block.sum() * inv_var;
    (*grad)[log_sd_at] += -n + ss * inv_var;
  }
  return n * (-0.5 * kLog2Pi - log_sd) - 0.5 * ss * inv_var;
}

double flat_normal(double v, Index at, Vector* grad) {
  if (grad) (*grad)[at] -= v / kFlatVariance;
  return -0.5 * (kLog2Pi + std::log(kFlatVariance)) - 0.5 * v * v / kFlatVariance;
}

double standard_normal_coordinate(double v, Index at, Vector* grad) {
  if (grad) (*grad)[at] -= v;
  return -0.5 * kLog2Pi - 0.5 * v * v;
}

class FunctionTarget final : public TargetModel {
 public:
  using LogDensity = std::function<double(const Eigen::Ref<const Vector>&, Vector*)>;
  using Constrain = std::function<Vector(const Eigen::Ref<const Vector>&)>;

  FunctionTarget(std::string name, Index dim, LogDensity fn, Constrain constrain = {})
      : name_(std::move(name)), dim_(dim), fn_(std::move(fn)), constrain_(std::move(constrain)) {}

  Index dim() const override { return dim_; }
  std::string name() const override { return name_; }
  double log_density(const Eigen::Ref<const Vector>& x, Vector* grad) const override {
    if (x.size() != dim_) {
      throw std::invalid_argument(name_ + ": expected dimension " + std::to_string(dim_) +
                                  ", got " + std::to_string(x.size()));
    }
    return fn_(x, grad);
  }
  Vector constrain(const Eigen::Ref<const Vector>& x) const override {
    return constrain_ ? constrain_(x) : Vector(x);
  }

 private:
  std::string name_;
  Index dim_;
  LogDensity fn_;
  Constrain constrain_;
};

}  // namespace

Vector TargetModel::score(const Eigen::Ref<const Vector>& x) const {
  Vector g(dim());
  log_density(x, &g);
  return g;
}

double funnel_log_density(const Eigen::Ref<const Vector>& x, Vector* grad) {
  if (x.size() != 10) throw std::invalid_argument("funnel: expected dimension 10");
  const double x0 = x[0];
  const double inv_var = std::exp(-x0);
  const auto rest = x.tail(9);
  const double ss = rest.squaredNorm();
  const double value = normal_log_pdf(x0, 0.0, 3.0) + 9.0 * (-0.5 * kLog2Pi - 0.5 * x0) -
                       0.5 * ss * inv_var;
  if (grad) {
    grad->resize(10);
    (*grad)[0] = -x0 / 9.0 - 4.5 + 0.5 * ss * inv_var;
    grad->tail(9) = -rest * inv_var;
  }
  return value;
}

double banana_log_density(const Eigen::Ref<const Vector>& x, Vector* grad) {
  if (x.size() != 100) throw std::invalid_argument("banana: expected dimension 100");
  const double x0 = x[0];
  const double resid = x[1] - (0.03 * x0 * x0 - 3.0);
  const auto rest = x.tail(98);
  const double value = normal_log_pdf(x0, 0.0, 10.0) - 0.5 * kLog2Pi - 0.5 * resid * resid +
                       98.0 * (-0.5 * kLog2Pi) - 0.5 * rest.squaredNorm();
  if (grad) {
    grad->resize(100);
    (*grad)[0] = -x0 / 100.0 + resid * 0.06 * x0;
    (*grad)[1] = -resid;
    grad->tail(98) = -rest;
  }
  return value;
}

double sgc_log_posterior(const Eigen::Ref<const Vector>& theta, const CreditDataset& data,
                         bool funnelized, Vector* grad) {
  const Index p = data.features.cols() > 0 ? data.features.cols() : CreditDataset::kFeatures;
  const Index expected = 1 + 2 * p + (funnelized ? 1 : 0);
  if (theta.size() != expected) {
    throw std::invalid_argument("sgc: expected dimension " + std::to_string(expected) + ", got " +
                                std::to_string(theta.size()));
  }
  if (grad) grad->setZero(expected);

  const double tau_raw = theta[0];
  const auto lambda_raw = theta.segment(1, p);
  const auto beta = theta.segment(1 + p, p);
  const double tau = softplus(tau_raw);
  const Vector lambda = lambda_raw.unaryExpr([](double u) { return softplus(u); });
  const Vector weights = beta.cwiseProduct(lambda);

  double value = 0.0;
  if (data.n_rows() > 0) {
    const Vector eta = tau * (data.features * weights);
    Vector resid(eta.size());
    for (Index i = 0; i < eta.size(); ++i) {
      const double y = data.labels[static_cast<std::size_t>(i)];
      // y log s(eta) + (1 - y) log s(-eta) = y eta - softplus(eta)
      value += y * eta[i] - softplus(eta[i]);
      resid[i] = y - sigmoid(eta[i]);
    }
    if (grad) {
      const Vector s = data.features.transpose() * resid;
      const double d_tau = weights.dot(s);
      (*grad)[0] += d_tau * sigmoid(tau_raw);
      for (Index j = 0; j < p; ++j) {
        (*grad)[1 + j] += tau * beta[j] * s[j] * sigmoid(lambda_raw[j]);
        (*grad)[1 + p + j] += tau * lambda[j] * s[j];
      }
    }
  }

  double d = 0.0;
  value += softplus_gamma_prior(tau_raw, d);
  if (grad) (*grad)[0] += d;
  for (Index j = 0; j < p; ++j) {
    value += softplus_gamma_prior(lambda_raw[j], d);
    if (grad) (*grad)[1 + j] += d;
  }

  if (!funnelized) {
    value += static_cast<double>(p) * (-0.5 * kLog2Pi) - 0.5 * beta.squaredNorm();
    if (grad) grad->segment(1 + p, p) -= beta;
  } else {
    const Index log_sigma_at = 1 + 2 * p;
    const double log_sigma = theta[log_sigma_at];
    const double inv_var = std::exp(-2.0 * log_sigma);
    const double ss = beta.squaredNorm();
    value += static_cast<double>(p) * (-0.5 * kLog2Pi - log_sigma) - 0.5 * ss * inv_var;
    value += standard_normal_coordinate(log_sigma, log_sigma_at, grad);
    if (grad) {
      grad->segment(1 + p, p) -= beta * inv_var;
      (*grad)[log_sigma_at] += -static_cast<double>(p) + ss * inv_var;
    }
  }
  return value;
}

RadonVariant parse_radon_variant(const std::string& id) {
  if (id == "vs" || id == "VS") return RadonVariant::VaryingSlopes;
  if (id == "vi" || id == "VI") return RadonVariant::VaryingIntercepts;
  if (id == "vsi" || id == "VSI" || id == "vis" || id == "VIS")
    return RadonVariant::VaryingSlopesIntercepts;
  throw std::invalid_argument("unknown radon variant '" + id + "'");
}

std::string to_string(RadonVariant v) {
  switch (v) {
    case RadonVariant::VaryingSlopes: return "vs";
    case RadonVariant::VaryingIntercepts: return "vi";
    case RadonVariant::VaryingSlopesIntercepts: return "vsi";
  }
  return "?";
}

Index radon_dim(RadonVariant v, int counties) {
  return v == RadonVariant::VaryingSlopesIntercepts ? 5 + 2 * counties : 4 + counties;
}

double radon_log_posterior(const Eigen::Ref<const Vector>& theta, const RadonDataset& data,
                           RadonVariant variant, Vector* grad) {
  const Index j = data.num_counties;
  const Index expected = radon_dim(variant, data.num_counties);
  if (theta.size() != expected) {
    throw std::invalid_argument("radon: expected dimension " + std::to_string(expected) +
                                ", got " + std::to_string(theta.size()));
  }
  if (grad) grad->setZero(expected);

  // Coordinates of the slope and intercept terms for each variant.
  Index slope_at = 0;     // first slope coordinate
  bool varying_slope = false;
  Index intercept_at = 0;
  bool varying_intercept = false;
  double value = standard_normal_coordinate(theta[0], 0, grad);  // log sigma_y
  switch (variant) {
    case RadonVariant::VaryingSlopes:
      value += flat_normal(theta[1], 1, grad);
      value += standard_normal_coordinate(theta[2], 2, grad);
      value += hierarchical_block(theta, 1, 2, 3, j, grad);
      value += flat_normal(theta[3 + j], 3 + j, grad);
      slope_at = 3;
      varying_slope = true;
      intercept_at = 3 + j;
      break;
    case RadonVariant::VaryingIntercepts:
      value += flat_normal(theta[1], 1, grad);
      value += flat_normal(theta[2], 2, grad);
      value += standard_normal_coordinate(theta[3], 3, grad);
      value += hierarchical_block(theta, 2, 3, 4, j, grad);
      slope_at = 1;
      intercept_at = 4;
      varying_intercept = true;
      break;
    case RadonVariant::VaryingSlopesIntercepts:
      value += flat_normal(theta[1], 1, grad);
      value += standard_normal_coordinate(theta[2], 2, grad);
      value += hierarchical_block(theta, 1, 2, 3, j, grad);
      value += flat_normal(theta[3 + j], 3 + j, grad);
      value += standard_normal_coordinate(theta[4 + j], 4 + j, grad);
      value += hierarchical_block(theta, 3 + j, 4 + j, 5 + j, j, grad);
      slope_at = 3;
      varying_slope = true;
      intercept_at = 5 + j;
      varying_intercept = true;
      break;
  }

  const double log_sigma_y = theta[0];
  const double inv_var = std::exp(-2.0 * log_sigma_y);
  double ss = 0.0;
  for (Index i = 0; i < data.n_rows(); ++i) {
    const auto row = static_cast<std::size_t>(i);
    const Index c = data.county[row];
    const double f = data.floor[row];
    const Index a_idx = varying_slope ? slope_at + c : slope_at;
    const Index b_idx = varying_intercept ? intercept_at + c : intercept_at;
    const double resid = data.log_radon[row] - (theta[a_idx] * f + theta[b_idx]);
    ss += resid * resid;
    if (grad) {
      (*grad)[a_idx] += resid * inv_var * f;
      (*grad)[b_idx] += resid * inv_var;
    }
  }
  const double n = static_cast<double>(data.n_rows());
  value += n * (-0.5 * kLog2Pi - log_sigma_y) - 0.5 * ss * inv_var;
  if (grad) (*grad)[0] += -n + ss * inv_var;
  return value;
}

std::unique_ptr<TargetModel> make_funnel() {
  return std::make_unique<FunctionTarget>("funnel", 10, funnel_log_density);
}

std::unique_ptr<TargetModel> make_banana() {
  return std::make_unique<FunctionTarget>("banana", 100, banana_log_density);
}

std::unique_ptr<TargetModel> make_sgc(CreditDataset data, bool funnelized) {
  const Index p = data.features.cols() > 0 ? data.features.cols() : CreditDataset::kFeatures;
  const Index dim = 1 + 2 * p + (funnelized ? 1 : 0);
  auto shared = std::make_shared<const CreditDataset>(std::move(data));
  auto fn = [shared, funnelized](const Eigen::Ref<const Vector>& x, Vector* g) {
    return sgc_log_posterior(x, *shared, funnelized, g);
  };
  auto constrain = [p, funnelized](const Eigen::Ref<const Vector>& x) {
    Vector out = x;
    for (Index k = 0; k <= p; ++k) out[k] = softplus(x[k]);
    if (funnelized) out[1 + 2 * p] = std::exp(x[1 + 2 * p]);
    return out;
  };
  return std::make_unique<FunctionTarget>(funnelized ? "sgc-funnel" : "sgc", dim, fn, constrain);
}

std::unique_ptr<TargetModel> make_radon(RadonDataset data, RadonVariant variant) {
  const Index dim = radon_dim(variant, data.num_counties);
  const Index j = data.num_counties;
  auto shared = std::make_shared<const RadonDataset>(std::move(data));
  auto fn = [shared, variant](const Eigen::Ref<const Vector>& x, Vector* g) {
    return radon_log_posterior(x, *shared, variant, g);
  };
  auto constrain = [variant, j](const Eigen::Ref<const Vector>& x) {
    Vector out = x;
    out[0] = std::exp(x[0]);
    if (variant == RadonVariant::VaryingIntercepts) {
      out[3] = std::exp(x[3]);
    } else {
      out[2] = std::exp(x[2]);
      if (variant == RadonVariant::VaryingSlopesIntercepts) out[4 + j] = std::exp(x[4 + j]);
    }
    return out;
  };
  return std::make_unique<FunctionTarget>("radon-" + to_string(variant), dim, fn, constrain);
}

Vector finite_difference_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                                  double h) {
  Vector g(x.size());
  Vector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double step = h * std::max(1.0, std::abs(x[i]));
    probe[i] = x[i] + step;
    const double up = f(probe);
    probe[i] = x[i] - step;
    const double down = f(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

}  // namespace flowprec::targets
