#ifndef FLOWPREC_FLOWS_HPP
#define FLOWPREC_FLOWS_HPP

#include "flowprec/common.hpp"
#include "flowprec/gaussianity.hpp"

#include <json.hpp>

#include <memory>
#include <string>
#include <vector>

namespace flowprec::flows {

/// Name and shape of one contiguous block of a flat parameter vector.
struct ParamSlice {
  std::string name;
  std::vector<Index> shape;
  Index size() const;
};

/// Invertible map f from target space (x) to latent space (z), optionally
/// conditioned on a context matrix. All maps are batched: one point per row.
/// An empty context is passed as a matrix with zero columns.
///
/// Direction convention: forward() is x -> z, inverse() is z -> x. Each
/// writes the per-row log|det J| of the direction it evaluates.
class Bijection {
 public:
  virtual ~Bijection() = default;

  virtual Index dim() const = 0;
  virtual Index context_dim() const { return 0; }
  virtual std::string kind() const = 0;

  virtual Matrix forward(const Matrix& x, const Matrix& ctx, Vector& logdet) const = 0;
  virtual Matrix inverse(const Matrix& z, const Matrix& ctx, Vector& logdet) const = 0;

  /// Reverse-mode pass through inverse(): returns dL/dz for
  /// L = <grad_x, x(z)> + sum_i grad_logdet_i * logdet_i(z).
  /// Context gradients are added to *grad_ctx when it is non-null.
  virtual Matrix inverse_vjp(const Matrix& z, const Matrix& ctx, const Matrix& grad_x,
                             const Vector& grad_logdet, Matrix* grad_ctx) const = 0;

  /// Reverse-mode pass through forward(): returns dL/dx and adds parameter
  /// gradients into grad_params (length num_params()).
  virtual Matrix forward_vjp(const Matrix& x, const Matrix& ctx, const Matrix& grad_z,
                             const Vector& grad_logdet, Matrix* grad_ctx,
                             Eigen::Ref<Vector> grad_params) const = 0;

  virtual Index num_params() const { return 0; }
  virtual Vector params() const { return {}; }
  virtual void set_params(const Eigen::Ref<const Vector>& p);
  virtual std::vector<ParamSlice> param_slices() const { return {}; }

  /// Data-dependent initialization hooks (ActNorm).
  virtual bool needs_initialization() const { return false; }
  virtual void initialize(const Matrix& x, const Matrix& ctx);

  virtual std::unique_ptr<Bijection> clone() const = 0;
  virtual nlohmann::json to_json() const;

  // Single-point conveniences for samplers.
  Vector forward_point(const Eigen::Ref<const Vector>& x, double* logdet = nullptr) const;
  Vector inverse_point(const Eigen::Ref<const Vector>& z, double* logdet = nullptr) const;
};

using BijectionPtr = std::unique_ptr<Bijection>;

/// Context with `rows` rows and no columns.
inline Matrix empty_context(Index rows) { return Matrix(rows, 0); }

class Identity final : public Bijection {
 public:
  explicit Identity(Index dim) : dim_(dim) {}
  Index dim() const override { return dim_; }
  std::string kind() const override { return "identity"; }
  Matrix forward(const Matrix& x, const Matrix&, Vector& logdet) const override;
  Matrix inverse(const Matrix& z, const Matrix&, Vector& logdet) const override;
  Matrix inverse_vjp(const Matrix&, const Matrix&, const Matrix& grad_x, const Vector&,
                     Matrix*) const override;
  Matrix forward_vjp(const Matrix&, const Matrix&, const Matrix& grad_z, const Vector&, Matrix*,
                     Eigen::Ref<Vector>) const override;
  BijectionPtr clone() const override { return std::make_unique<Identity>(*this); }

 private:
  Index dim_;
};

/// Trainable elementwise affine map z = x * exp(log_scale) + shift.
/// Identity until initialize() standardizes its first batch.
class ActNorm final : public Bijection {
 public:
  explicit ActNorm(Index dim);
  Index dim() const override { return log_scale_.size(); }
  std::string kind() const override { return "actnorm"; }
  Matrix forward(const Matrix& x, const Matrix&, Vector& logdet) const override;
  Matrix inverse(const Matrix& z, const Matrix&, Vector& logdet) const override;
  Matrix inverse_vjp(const Matrix& z, const Matrix&, const Matrix& grad_x,
                     const Vector& grad_logdet, Matrix*) const override;
  Matrix forward_vjp(const Matrix& x, const Matrix&, const Matrix& grad_z,
                     const Vector& grad_logdet, Matrix*,
                     Eigen::Ref<Vector> grad_params) const override;

  Index num_params() const override { return 2 * dim(); }
  Vector params() const override;
  void set_params(const Eigen::Ref<const Vector>& p) override;
  std::vector<ParamSlice> param_slices() const override;

  bool needs_initialization() const override { return !initialized_; }
  void initialize(const Matrix& x, const Matrix& ctx) override;
  bool initialized() const { return initialized_; }
  void set_initialized(bool v) { initialized_ = v; }
  BijectionPtr clone() const override { return std::make_unique<ActNorm>(*this); }

 private:
  Vector log_scale_;
  Vector shift_;
  bool initialized_ = false;
};

/// Reverses the order of coordinates.
class Reverse final : public Bijection {
 public:
  explicit Reverse(Index dim) : dim_(dim) {}
  Index dim() const override { return dim_; }
  std::string kind() const override { return "reverse"; }
  Matrix forward(const Matrix& x, const Matrix&, Vector& logdet) const override;
  Matrix inverse(const Matrix& z, const Matrix&, Vector& logdet) const override;
  Matrix inverse_vjp(const Matrix&, const Matrix&, const Matrix& grad_x, const Vector&,
                     Matrix*) const override;
  Matrix forward_vjp(const Matrix&, const Matrix&, const Matrix& grad_z, const Vector&, Matrix*,
                     Eigen::Ref<Vector>) const override;
  BijectionPtr clone() const override { return std::make_unique<Reverse>(*this); }

 private:
  Index dim_;
};

/// Affine coupling with a linear conditioner:
///   z_A = x_A,  [log a, b] = [x_A, ctx] W + bias,  z_B = exp(log a) * x_B + b.
/// A holds the first ceil(d/2) coordinates; for d = 1, A is empty and the
/// conditioner sees only the context. log a is clamped to [-10, 10].
class AffineCoupling final : public Bijection {
 public:
  static constexpr double kLogScaleBound = 10.0;

  AffineCoupling(Index dim, Index context_dim);
  Index dim() const override { return split_ + tail_; }
  Index context_dim() const override { return context_dim_; }
  std::string kind() const override { return "affine_coupling"; }
  Index identity_size() const { return split_; }   // |A|
  Index transformed_size() const { return tail_; }  // |B|

  Matrix forward(const Matrix& x, const Matrix& ctx, Vector& logdet) const override;
  Matrix inverse(const Matrix& z, const Matrix& ctx, Vector& logdet) const override;
  Matrix inverse_vjp(const Matrix& z, const Matrix& ctx, const Matrix& grad_x,
                     const Vector& grad_logdet, Matrix* grad_ctx) const override;
  Matrix forward_vjp(const Matrix& x, const Matrix& ctx, const Matrix& grad_z,
                     const Vector& grad_logdet, Matrix* grad_ctx,
                     Eigen::Ref<Vector> grad_params) const override;

  Index num_params() const override { return weights_.size() + bias_.size(); }
  Vector params() const override;
  void set_params(const Eigen::Ref<const Vector>& p) override;
  std::vector<ParamSlice> param_slices() const override;
  BijectionPtr clone() const override { return std::make_unique<AffineCoupling>(*this); }

  Matrix& weights() { return weights_; }
  Vector& bias() { return bias_; }

 private:
  Matrix conditioner(const Matrix& kept, const Matrix& ctx) const;

  Index split_;
  Index tail_;
  Index context_dim_;
  Matrix weights_;  // (|A| + m) x 2|B|
  Vector bias_;     // 2|B|
};

/// Sequential composition; forward applies layers front to back.
class Composite final : public Bijection {
 public:
  Composite(Index dim, Index context_dim) : dim_(dim), context_dim_(context_dim) {}
  Composite(const Composite& other);
  Composite& operator=(const Composite& other);
  Composite(Composite&&) = default;
  Composite& operator=(Composite&&) = default;

  void add(BijectionPtr layer);
  const std::vector<BijectionPtr>& layers() const { return layers_; }

  Index dim() const override { return dim_; }
  Index context_dim() const override { return context_dim_; }
  std::string kind() const override { return "composite"; }

  Matrix forward(const Matrix& x, const Matrix& ctx, Vector& logdet) const override;
  Matrix inverse(const Matrix& z, const Matrix& ctx, Vector& logdet) const override;
  Matrix inverse_vjp(const Matrix& z, const Matrix& ctx, const Matrix& grad_x,
                     const Vector& grad_logdet, Matrix* grad_ctx) const override;
  Matrix forward_vjp(const Matrix& x, const Matrix& ctx, const Matrix& grad_z,
                     const Vector& grad_logdet, Matrix* grad_ctx,
                     Eigen::Ref<Vector> grad_params) const override;

  /// forward() that throws NonFiniteError naming the first layer whose output
  /// is not finite.
  Matrix forward_checked(const Matrix& x, const Matrix& ctx, Vector& logdet) const;

  Index num_params() const override;
  Vector params() const override;
  void set_params(const Eigen::Ref<const Vector>& p) override;
  std::vector<ParamSlice> param_slices() const override;

  bool needs_initialization() const override;
  void initialize(const Matrix& x, const Matrix& ctx) override;
  BijectionPtr clone() const override { return std::make_unique<Composite>(*this); }
  nlohmann::json to_json() const override;

 private:
  Index dim_;
  Index context_dim_;
  std::vector<BijectionPtr> layers_;
};

/// x = L z + mu with lower-triangular L (positive diagonal). Covers the
/// diagonal and dense linear preconditioners and the Gaussian block.
class AffineMap final : public Bijection {
 public:
  AffineMap(Vector mean, Matrix lower, bool diagonal);
  Index dim() const override { return mean_.size(); }
  std::string kind() const override { return diagonal_ ? "diagonal" : "dense"; }
  const Vector& mean() const { return mean_; }
  const Matrix& lower() const { return lower_; }
  double log_det() const;  // sum log L_ii

  Matrix forward(const Matrix& x, const Matrix&, Vector& logdet) const override;
  Matrix inverse(const Matrix& z, const Matrix&, Vector& logdet) const override;
  Matrix inverse_vjp(const Matrix&, const Matrix&, const Matrix& grad_x, const Vector&,
                     Matrix*) const override;
  Matrix forward_vjp(const Matrix&, const Matrix&, const Matrix& grad_z, const Vector&, Matrix*,
                     Eigen::Ref<Vector>) const override;
  BijectionPtr clone() const override { return std::make_unique<AffineMap>(*this); }
  nlohmann::json to_json() const override;

 private:
  Vector mean_;
  Matrix lower_;
  bool diagonal_;
};

/// Gaussian model N(mu, L L^T) of the approximately Gaussian coordinates.
struct GaussianBlock {
  Vector mean;
  Matrix lower;
  bool diagonal_fallback = false;
  double jitter = 0.0;  // added to the covariance diagonal, 0 if none was needed
};

/// Column means and Cholesky factor of the population covariance. On
/// factorization failure, jitter of 1e-9 * mean(diag) is added and escalated
/// x10 up to 1e-3 * mean(diag); after that a diagonal factor is used.
GaussianBlock fit_gaussian_block(const Matrix& samples);

/// Per-dimension mean and standard deviation (variance floored at 1e-12).
std::unique_ptr<AffineMap> diagonal_fit(const Matrix& samples);
/// Cholesky affine map of the sample covariance; same fallbacks as
/// fit_gaussian_block.
std::unique_ptr<AffineMap> dense_fit(const Matrix& samples);

/// ActNorm, then n_blocks x (ActNorm, AffineCoupling, Reverse). Coupling
/// weights start at zero so the map is the identity before training.
std::unique_ptr<Composite> rnvp_build(Index dim, Index context_dim, int n_blocks = 2);

/// log q(x | ctx) = log N(f(x | ctx); 0, I) + log|det J_f|, per row.
/// Throws NonFiniteError naming the layer for non-finite intermediates.
Vector flow_log_density(const Composite& flow, const Matrix& x, const Matrix& ctx);

/// Gaussian block on G, conditional flow on H given x_G. Latent coordinates
/// keep the original positions: z[G] = L^-1 (x[G] - mu), z[H] = f(x[H] | x[G]).
class FactorizedPreconditioner final : public Bijection {
 public:
  FactorizedPreconditioner(gaussianity::GaussianityReport report, GaussianBlock block,
                           std::unique_ptr<Composite> flow);
  FactorizedPreconditioner(const FactorizedPreconditioner& other);

  Index dim() const override { return dim_; }
  std::string kind() const override { return "frnvp"; }
  const gaussianity::GaussianityReport& report() const { return report_; }
  const std::vector<Index>& gaussian_indices() const { return report_.gaussian_set; }
  const std::vector<Index>& flow_indices() const { return report_.complement_set; }
  const AffineMap* gaussian_map() const { return gaussian_.get(); }
  Composite* conditional_flow() { return flow_.get(); }
  const Composite* conditional_flow() const { return flow_.get(); }

  /// Columns of x in G and H order.
  Matrix gaussian_part(const Matrix& x) const;
  Matrix flow_part(const Matrix& x) const;

  /// log p_G(x_G) and log p_H(x_H | x_G), per row.
  Vector gaussian_log_density(const Matrix& x) const;
  Vector conditional_log_density(const Matrix& x) const;
  /// log p(x) evaluated through the joint map.
  Vector log_density(const Matrix& x) const;

  Matrix forward(const Matrix& x, const Matrix&, Vector& logdet) const override;
  Matrix inverse(const Matrix& z, const Matrix&, Vector& logdet) const override;
  Matrix inverse_vjp(const Matrix& z, const Matrix&, const Matrix& grad_x,
                     const Vector& grad_logdet, Matrix*) const override;
  Matrix forward_vjp(const Matrix& x, const Matrix&, const Matrix& grad_z,
                     const Vector& grad_logdet, Matrix*,
                     Eigen::Ref<Vector> grad_params) const override;

  Index num_params() const override { return flow_ ? flow_->num_params() : 0; }
  Vector params() const override { return flow_ ? flow_->params() : Vector(); }
  void set_params(const Eigen::Ref<const Vector>& p) override;
  std::vector<ParamSlice> param_slices() const override;
  /// Initializes the conditional flow's ActNorm layers on (x_H, x_G).
  bool needs_initialization() const override;
  void initialize(const Matrix& x, const Matrix& ctx) override;
  BijectionPtr clone() const override {
    return std::make_unique<FactorizedPreconditioner>(*this);
  }
  nlohmann::json to_json() const override;

 private:
  void scatter(const Matrix& g_part, const Matrix& h_part, Matrix& out) const;

  Index dim_;
  gaussianity::GaussianityReport report_;
  std::unique_ptr<AffineMap> gaussian_;  // null when G is empty
  std::unique_ptr<Composite> flow_;      // null when H is empty
};

/// Classifies the columns of `samples`, fits the Gaussian block on G and
/// builds an untrained conditional RNVP on H (context = x_G).
std::unique_ptr<FactorizedPreconditioner> build_factorized(const Matrix& samples, double constant,
                                                           int n_blocks = 2);

/// Restores a bijection written by Bijection::to_json().
BijectionPtr bijection_from_json(const nlohmann::json& j);

}  // namespace flowprec::flows

#endif  // FLOWPREC_FLOWS_HPP
