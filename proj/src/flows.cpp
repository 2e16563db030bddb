#include "flowprec/flows.hpp"

#include "flowprec/math.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flowprec::flows {

namespace {

constexpr double kVarianceFloor = 1e-12;

nlohmann::json matrix_values(const Matrix& m) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  return v;
}

Matrix matrix_from(const nlohmann::json& values, Index rows, Index cols) {
  Matrix m(rows, cols);
  const auto v = values.get<std::vector<double>>();
  if (static_cast<Index>(v.size()) != rows * cols)
    throw std::invalid_argument("bijection_from_json: value count does not match shape");
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = v[static_cast<std::size_t>(i * cols + j)];
  return m;
}

Matrix take_columns(const Matrix& x, const std::vector<Index>& idx) {
  Matrix out(x.rows(), static_cast<Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Index>(k)) = x.col(idx[k]);
  return out;
}

// 0/1 mask of conditioner outputs where the log-scale clamp is inactive.
Matrix clamp_mask(const Matrix& raw) {
  return raw.unaryExpr([](double h) {
    return std::abs(h) < AffineCoupling::kLogScaleBound ? 1.0 : 0.0;
  });
}

Matrix clamp_log_scale(const Matrix& raw) {
  return raw.unaryExpr([](double h) {
    return std::clamp(h, -AffineCoupling::kLogScaleBound, AffineCoupling::kLogScaleBound);
  });
}

}  // namespace

Index ParamSlice::size() const {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Bijection

void Bijection::set_params(const Eigen::Ref<const Vector>& p) {
  if (p.size() != 0) throw std::invalid_argument(kind() + " has no parameters");
}

void Bijection::initialize(const Matrix&, const Matrix&) {}

nlohmann::json Bijection::to_json() const {
  nlohmann::json j;
  j["kind"] = kind();
  j["dim"] = dim();
  j["context_dim"] = context_dim();
  auto slices = nlohmann::json::array();
  const Vector p = params();
  Index offset = 0;
  for (const auto& s : param_slices()) {
    std::vector<double> values(p.data() + offset, p.data() + offset + s.size());
    slices.push_back({{"name", s.name}, {"shape", s.shape}, {"values", values}});
    offset += s.size();
  }
  j["params"] = slices;
  return j;
}

Vector Bijection::forward_point(const Eigen::Ref<const Vector>& x, double* logdet) const {
  Vector ld;
  const Matrix z = forward(x.transpose(), empty_context(1), ld);
  if (logdet) *logdet = ld[0];
  return z.row(0).transpose();
}

Vector Bijection::inverse_point(const Eigen::Ref<const Vector>& z, double* logdet) const {
  Vector ld;
  const Matrix x = inverse(z.transpose(), empty_context(1), ld);
  if (logdet) *logdet = ld[0];
  return x.row(0).transpose();
}

// ---------------------------------------------------------------------------
// Identity

Matrix Identity::forward(const Matrix& x, const Matrix&, Vector& logdet) const {
  logdet.setZero(x.rows());
  return x;
}

Matrix Identity::inverse(const Matrix& z, const Matrix&, Vector& logdet) const {
  logdet.setZero(z.rows());
  return z;
}

Matrix Identity::inverse_vjp(const Matrix&, const Matrix&, const Matrix& grad_x, const Vector&,
                             Matrix*) const {
  return grad_x;
}

Matrix Identity::forward_vjp(const Matrix&, const Matrix&, const Matrix& grad_z, const Vector&,
                             Matrix*, Eigen::Ref<Vector>) const {
  return grad_z;
}

// ---------------------------------------------------------------------------
// ActNorm

ActNorm::ActNorm(Index dim) : log_scale_(Vector::Zero(dim)), shift_(Vector::Zero(dim)) {}

Matrix ActNorm::forward(const Matrix& x, const Matrix&, Vector& logdet) const {
  logdet.setConstant(x.rows(), log_scale_.sum());
  const Eigen::RowVectorXd scale = log_scale_.array().exp().transpose();
  return (x.array().rowwise() * scale.array()).rowwise() + shift_.transpose().array();
}

Matrix ActNorm::inverse(const Matrix& z, const Matrix&, Vector& logdet) const {
  logdet.setConstant(z.rows(), -log_scale_.sum());
  const Eigen::RowVectorXd inv_scale = (-log_scale_.array()).exp().transpose();
  return (z.array().rowwise() - shift_.transpose().array()).rowwise() * inv_scale.array();
}

Matrix ActNorm::inverse_vjp(const Matrix&, const Matrix&, const Matrix& grad_x, const Vector&,
                            Matrix*) const {
  // The inverse log-det is constant in z.
  const Eigen::RowVectorXd inv_scale = (-log_scale_.array()).exp().transpose();
  return grad_x.array().rowwise() * inv_scale.array();
}

Matrix ActNorm::forward_vjp(const Matrix& x, const Matrix&, const Matrix& grad_z,
                            const Vector& grad_logdet, Matrix*,
                            Eigen::Ref<Vector> grad_params) const {
  const Index d = dim();
  const Eigen::RowVectorXd scale = log_scale_.array().exp().transpose();
  const Matrix grad_x = grad_z.array().rowwise() * scale.array();
  // d z_ij / d s_j = x_ij exp(s_j); d logdet_i / d s_j = 1.
  grad_params.head(d) += (grad_x.array() * x.array()).colwise().sum().transpose().matrix() +
                         Vector::Constant(d, grad_logdet.sum());
  grad_params.tail(d) += grad_z.colwise().sum().transpose();
  return grad_x;
}

Vector ActNorm::params() const {
  Vector p(num_params());
  p << log_scale_, shift_;
  return p;
}

void ActNorm::set_params(const Eigen::Ref<const Vector>& p) {
  if (p.size() != num_params()) throw std::invalid_argument("actnorm: parameter size mismatch");
  log_scale_ = p.head(dim());
  shift_ = p.tail(dim());
}

std::vector<ParamSlice> ActNorm::param_slices() const {
  return {{"log_scale", {dim()}}, {"shift", {dim()}}};
}

void ActNorm::initialize(const Matrix& x, const Matrix&) {
  if (x.rows() < 1) throw std::invalid_argument("actnorm: empty initialization batch");
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::RowVectorXd var = (x.rowwise() - mean).array().square().colwise().mean();
  for (Index j = 0; j < dim(); ++j) {
    const double sd = std::sqrt(std::max(var[j], kVarianceFloor));
    log_scale_[j] = -std::log(sd);
    shift_[j] = -mean[j] / sd;
  }
  initialized_ = true;
}

// ---------------------------------------------------------------------------
// Reverse

Matrix Reverse::forward(const Matrix& x, const Matrix&, Vector& logdet) const {
  logdet.setZero(x.rows());
  return x.rowwise().reverse();
}

Matrix Reverse::inverse(const Matrix& z, const Matrix&, Vector& logdet) const {
  logdet.setZero(z.rows());
  return z.rowwise().reverse();
}

Matrix Reverse::inverse_vjp(const Matrix&, const Matrix&, const Matrix& grad_x, const Vector&,
                            Matrix*) const {
  return grad_x.rowwise().reverse();
}

Matrix Reverse::forward_vjp(const Matrix&, const Matrix&, const Matrix& grad_z, const Vector&,
                            Matrix*, Eigen::Ref<Vector>) const {
  return grad_z.rowwise().reverse();
}

// ---------------------------------------------------------------------------
// AffineCoupling

AffineCoupling::AffineCoupling(Index dim, Index context_dim)
    : split_(dim == 1 ? 0 : (dim + 1) / 2),
      tail_(dim - (dim == 1 ? 0 : (dim + 1) / 2)),
      context_dim_(context_dim),
      weights_(Matrix::Zero(split_ + context_dim, 2 * tail_)),
      bias_(Vector::Zero(2 * tail_)) {
  if (dim < 1) throw std::invalid_argument("affine coupling: dimension must be positive");
}

Matrix AffineCoupling::conditioner(const Matrix& kept, const Matrix& ctx) const {
  Matrix raw(kept.rows(), 2 * tail_);
  raw.rowwise() = bias_.transpose();
  if (split_ > 0) raw.noalias() += kept * weights_.topRows(split_);
  if (context_dim_ > 0) {
    if (ctx.cols() != context_dim_ || ctx.rows() != kept.rows())
      throw std::invalid_argument("affine coupling: context shape mismatch");
    raw.noalias() += ctx * weights_.bottomRows(context_dim_);
  }
  return raw;
}

Matrix AffineCoupling::forward(const Matrix& x, const Matrix& ctx, Vector& logdet) const {
  const Matrix raw = conditioner(x.leftCols(split_), ctx);
  const Matrix log_scale = clamp_log_scale(raw.leftCols(tail_));
  Matrix z = x;
  z.rightCols(tail_) = (x.rightCols(tail_).array() * log_scale.array().exp() +
                        raw.rightCols(tail_).array())
                           .matrix();
  logdet = log_scale.rowwise().sum();
  return z;
}

Matrix AffineCoupling::inverse(const Matrix& z, const Matrix& ctx, Vector& logdet) const {
  const Matrix raw = conditioner(z.leftCols(split_), ctx);
  const Matrix log_scale = clamp_log_scale(raw.leftCols(tail_));
  Matrix x = z;
  x.rightCols(tail_) = ((z.rightCols(tail_) - raw.rightCols(tail_)).array() *
                        (-log_scale.array()).exp())
                           .matrix();
  logdet = -log_scale.rowwise().sum();
  return x;
}

Matrix AffineCoupling::inverse_vjp(const Matrix& z, const Matrix& ctx, const Matrix& grad_x,
                                   const Vector& grad_logdet, Matrix* grad_ctx) const {
  const Matrix raw = conditioner(z.leftCols(split_), ctx);
  const Matrix mask = clamp_mask(raw.leftCols(tail_));
  const Eigen::ArrayXXd inv_scale = (-clamp_log_scale(raw.leftCols(tail_)).array()).exp();
  const Matrix x_tail = (z.rightCols(tail_) - raw.rightCols(tail_)).array() * inv_scale;
  const Matrix grad_x_tail = grad_x.rightCols(tail_);

  Matrix grad_raw(z.rows(), 2 * tail_);
  // x_B = (z_B - shift) * exp(-log_scale); inverse log-det = -sum log_scale.
  grad_raw.leftCols(tail_) =
      ((-(grad_x_tail.array() * x_tail.array())).colwise() - grad_logdet.array()) * mask.array();
  grad_raw.rightCols(tail_) = -(grad_x_tail.array() * inv_scale).matrix();

  Matrix grad_z(z.rows(), dim());
  grad_z.rightCols(tail_) = grad_x_tail.array() * inv_scale;
  if (split_ > 0) {
    grad_z.leftCols(split_) = grad_x.leftCols(split_);
    grad_z.leftCols(split_).noalias() += grad_raw * weights_.topRows(split_).transpose();
  }
  if (grad_ctx && context_dim_ > 0)
    grad_ctx->noalias() += grad_raw * weights_.bottomRows(context_dim_).transpose();
  return grad_z;
}

Matrix AffineCoupling::forward_vjp(const Matrix& x, const Matrix& ctx, const Matrix& grad_z,
                                   const Vector& grad_logdet, Matrix* grad_ctx,
                                   Eigen::Ref<Vector> grad_params) const {
  const Matrix raw = conditioner(x.leftCols(split_), ctx);
  const Matrix mask = clamp_mask(raw.leftCols(tail_));
  const Eigen::ArrayXXd scale = clamp_log_scale(raw.leftCols(tail_)).array().exp();
  const Matrix grad_z_tail = grad_z.rightCols(tail_);

  Matrix grad_raw(x.rows(), 2 * tail_);
  // z_B = x_B * exp(log_scale) + shift; log-det = sum log_scale.
  grad_raw.leftCols(tail_) =
      ((grad_z_tail.array() * x.rightCols(tail_).array() * scale).colwise() +
       grad_logdet.array()) *
      mask.array();
  grad_raw.rightCols(tail_) = grad_z_tail;

  // Parameter layout: W row-major, then bias.
  const Index n_weights = weights_.size();
  Matrix grad_w(weights_.rows(), weights_.cols());
  if (split_ > 0) grad_w.topRows(split_).noalias() = x.leftCols(split_).transpose() * grad_raw;
  if (context_dim_ > 0) grad_w.bottomRows(context_dim_).noalias() = ctx.transpose() * grad_raw;
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      grad_params.data(), weights_.rows(), weights_.cols()) += grad_w;
  grad_params.segment(n_weights, bias_.size()) += grad_raw.colwise().sum().transpose();

  Matrix grad_x(x.rows(), dim());
  grad_x.rightCols(tail_) = grad_z_tail.array() * scale;
  if (split_ > 0) {
    grad_x.leftCols(split_) = grad_z.leftCols(split_);
    grad_x.leftCols(split_).noalias() += grad_raw * weights_.topRows(split_).transpose();
  }
  if (grad_ctx && context_dim_ > 0)
    grad_ctx->noalias() += grad_raw * weights_.bottomRows(context_dim_).transpose();
  return grad_x;
}

Vector AffineCoupling::params() const {
  Vector p(num_params());
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      p.data(), weights_.rows(), weights_.cols()) = weights_;
  p.tail(bias_.size()) = bias_;
  return p;
}

void AffineCoupling::set_params(const Eigen::Ref<const Vector>& p) {
  if (p.size() != num_params()) throw std::invalid_argument("coupling: parameter size mismatch");
  weights_ = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      p.data(), weights_.rows(), weights_.cols());
  bias_ = p.tail(bias_.size());
}

std::vector<ParamSlice> AffineCoupling::param_slices() const {
  return {{"weight", {weights_.rows(), weights_.cols()}}, {"bias", {bias_.size()}}};
}

// ---------------------------------------------------------------------------
// Composite

Composite::Composite(const Composite& other)
    : dim_(other.dim_), context_dim_(other.context_dim_) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Composite& Composite::operator=(const Composite& other) {
  if (this != &other) {
    Composite copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Composite::add(BijectionPtr layer) {
  if (layer->dim() != dim_) throw std::invalid_argument("composite: layer dimension mismatch");
  if (layer->context_dim() != 0 && layer->context_dim() != context_dim_)
    throw std::invalid_argument("composite: layer context dimension mismatch");
  layers_.push_back(std::move(layer));
}

Matrix Composite::forward(const Matrix& x, const Matrix& ctx, Vector& logdet) const {
  logdet.setZero(x.rows());
  Matrix cur = x;
  Vector ld;
  for (const auto& layer : layers_) {
    cur = layer->forward(cur, ctx, ld);
    logdet += ld;
  }
  return cur;
}

Matrix Composite::forward_checked(const Matrix& x, const Matrix& ctx, Vector& logdet) const {
  logdet.setZero(x.rows());
  Matrix cur = x;
  Vector ld;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    cur = layers_[k]->forward(cur, ctx, ld);
    logdet += ld;
    if (!cur.allFinite() || !ld.allFinite()) {
      throw NonFiniteError("non-finite value after layer " + std::to_string(k) + " (" +
                           layers_[k]->kind() + ")");
    }
  }
  return cur;
}

Matrix Composite::inverse(const Matrix& z, const Matrix& ctx, Vector& logdet) const {
  logdet.setZero(z.rows());
  Matrix cur = z;
  Vector ld;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    cur = (*it)->inverse(cur, ctx, ld);
    logdet += ld;
  }
  return cur;
}

Matrix Composite::inverse_vjp(const Matrix& z, const Matrix& ctx, const Matrix& grad_x,
                              const Vector& grad_logdet, Matrix* grad_ctx) const {
  // inputs[k] is the latent-side input of layer k's inverse.
  std::vector<Matrix> inputs(layers_.size());
  Matrix cur = z;
  Vector ld;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    inputs[k] = cur;
    cur = layers_[k]->inverse(cur, ctx, ld);
  }
  Matrix grad = grad_x;
  for (std::size_t k = 0; k < layers_.size(); ++k)
    grad = layers_[k]->inverse_vjp(inputs[k], ctx, grad, grad_logdet, grad_ctx);
  return grad;
}

Matrix Composite::forward_vjp(const Matrix& x, const Matrix& ctx, const Matrix& grad_z,
                              const Vector& grad_logdet, Matrix* grad_ctx,
                              Eigen::Ref<Vector> grad_params) const {
  std::vector<Matrix> inputs(layers_.size());
  std::vector<Index> offsets(layers_.size());
  Matrix cur = x;
  Vector ld;
  Index offset = 0;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    inputs[k] = cur;
    offsets[k] = offset;
    offset += layers_[k]->num_params();
    if (k + 1 < layers_.size()) cur = layers_[k]->forward(cur, ctx, ld);
  }
  Matrix grad = grad_z;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    grad = layers_[k]->forward_vjp(inputs[k], ctx, grad, grad_logdet, grad_ctx,
                                   grad_params.segment(offsets[k], layers_[k]->num_params()));
  }
  return grad;
}

Index Composite::num_params() const {
  Index n = 0;
  for (const auto& l : layers_) n += l->num_params();
  return n;
}

Vector Composite::params() const {
  Vector p(num_params());
  Index offset = 0;
  for (const auto& l : layers_) {
    p.segment(offset, l->num_params()) = l->params();
    offset += l->num_params();
  }
  return p;
}

void Composite::set_params(const Eigen::Ref<const Vector>& p) {
  if (p.size() != num_params()) throw std::invalid_argument("composite: parameter size mismatch");
  Index offset = 0;
  for (auto& l : layers_) {
    l->set_params(p.segment(offset, l->num_params()));
    offset += l->num_params();
  }
}

std::vector<ParamSlice> Composite::param_slices() const {
  std::vector<ParamSlice> out;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    for (auto s : layers_[k]->param_slices()) {
      s.name = "layer" + std::to_string(k) + "." + layers_[k]->kind() + "." + s.name;
      out.push_back(std::move(s));
    }
  }
  return out;
}

bool Composite::needs_initialization() const {
  return std::any_of(layers_.begin(), layers_.end(),
                     [](const auto& l) { return l->needs_initialization(); });
}

void Composite::initialize(const Matrix& x, const Matrix& ctx) {
  Matrix cur = x;
  Vector ld;
  for (auto& layer : layers_) {
    if (layer->needs_initialization()) layer->initialize(cur, ctx);
    cur = layer->forward(cur, ctx, ld);
  }
}

nlohmann::json Composite::to_json() const {
  nlohmann::json j;
  j["kind"] = kind();
  j["dim"] = dim_;
  j["context_dim"] = context_dim_;
  auto layers = nlohmann::json::array();
  for (const auto& l : layers_) {
    auto lj = l->to_json();
    if (const auto* an = dynamic_cast<const ActNorm*>(l.get())) lj["initialized"] = an->initialized();
    layers.push_back(std::move(lj));
  }
  j["layers"] = layers;
  return j;
}

// ---------------------------------------------------------------------------
// AffineMap

AffineMap::AffineMap(Vector mean, Matrix lower, bool diagonal)
    : mean_(std::move(mean)), lower_(std::move(lower)), diagonal_(diagonal) {
  if (lower_.rows() != mean_.size() || lower_.cols() != mean_.size())
    throw std::invalid_argument("affine map: shape mismatch");
  if ((lower_.diagonal().array() <= 0.0).any())
    throw std::invalid_argument("affine map: factor must have a positive diagonal");
}

double AffineMap::log_det() const { return lower_.diagonal().array().log().sum(); }

Matrix AffineMap::forward(const Matrix& x, const Matrix&, Vector& logdet) const {
  logdet.setConstant(x.rows(), -log_det());
  const Matrix centred = x.rowwise() - mean_.transpose();
  if (diagonal_) return centred.array().rowwise() / lower_.diagonal().transpose().array();
  // z^T = L^-1 (x - mu)^T, solved for all rows at once.
  return lower_.triangularView<Eigen::Lower>().solve(centred.transpose()).transpose();
}

Matrix AffineMap::inverse(const Matrix& z, const Matrix&, Vector& logdet) const {
  logdet.setConstant(z.rows(), log_det());
  if (diagonal_) {
    return (z.array().rowwise() * lower_.diagonal().transpose().array()).rowwise() +
           mean_.transpose().array();
  }
  Matrix x = z * lower_.triangularView<Eigen::Lower>().transpose();
  x.rowwise() += mean_.transpose();
  return x;
}

Matrix AffineMap::inverse_vjp(const Matrix&, const Matrix&, const Matrix& grad_x, const Vector&,
                              Matrix*) const {
  if (diagonal_) return grad_x.array().rowwise() * lower_.diagonal().transpose().array();
  return grad_x * lower_.triangularView<Eigen::Lower>();
}

Matrix AffineMap::forward_vjp(const Matrix&, const Matrix&, const Matrix& grad_z, const Vector&,
                              Matrix*, Eigen::Ref<Vector>) const {
  if (diagonal_) return grad_z.array().rowwise() / lower_.diagonal().transpose().array();
  // z = (x - mu) L^-T  =>  dL/dx = grad_z L^-1
  return lower_.triangularView<Eigen::Lower>().transpose().solve(grad_z.transpose()).transpose();
}

nlohmann::json AffineMap::to_json() const {
  nlohmann::json j;
  j["kind"] = kind();
  j["dim"] = dim();
  j["context_dim"] = 0;
  j["params"] = nlohmann::json::array(
      {{{"name", "mean"}, {"shape", {dim()}}, {"values", matrix_values(mean_.transpose())}},
       {{"name", "lower"}, {"shape", {dim(), dim()}}, {"values", matrix_values(lower_)}}});
  return j;
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

struct CholeskyResult {
  Matrix lower;
  bool diagonal_fallback = false;
  double jitter = 0.0;
};

CholeskyResult robust_cholesky(const Matrix& cov) {
  CholeskyResult out;
  const Index m = cov.rows();
  const double mean_diag = cov.diagonal().mean();
  auto attempt = [&](double jitter) {
    Matrix a = cov;
    a.diagonal().array() += jitter;
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) return false;
    Matrix l = llt.matrixL();
    if (!l.allFinite() || (l.diagonal().array() <= 0.0).any()) return false;
    out.lower = std::move(l);
    out.jitter = jitter;
    return true;
  };
  if (mean_diag > 0.0 && std::isfinite(mean_diag)) {
    if (attempt(0.0)) return out;
    for (double rel = 1e-9; rel <= 1e-3 * (1.0 + 1e-9); rel *= 10.0)
      if (attempt(rel * mean_diag)) return out;
  }
  out.diagonal_fallback = true;
  out.jitter = 0.0;
  out.lower = Matrix::Zero(m, m);
  for (Index j = 0; j < m; ++j) {
    const double v = cov(j, j);
    out.lower(j, j) = std::sqrt(std::isfinite(v) ? std::max(v, kVarianceFloor) : kVarianceFloor);
  }
  return out;
}

}  // namespace

GaussianBlock fit_gaussian_block(const Matrix& samples) {
  if (samples.rows() < 2) throw std::invalid_argument("fit_gaussian_block: need at least 2 rows");
  GaussianBlock block;
  block.mean = samples.colwise().mean().transpose();
  const Matrix centred = samples.rowwise() - block.mean.transpose();
  const Matrix cov = (centred.transpose() * centred) / static_cast<double>(samples.rows());
  auto chol = robust_cholesky(cov);
  if (chol.diagonal_fallback) warn("Cholesky failed after maximum jitter; using diagonal factor");
  block.lower = std::move(chol.lower);
  block.diagonal_fallback = chol.diagonal_fallback;
  block.jitter = chol.jitter;
  return block;
}

std::unique_ptr<AffineMap> diagonal_fit(const Matrix& samples) {
  if (samples.rows() < 2) throw std::invalid_argument("diagonal_fit: need at least 2 rows");
  const Vector mean = samples.colwise().mean().transpose();
  const Vector var = (samples.rowwise() - mean.transpose()).array().square().colwise().mean();
  Matrix lower = Matrix::Zero(mean.size(), mean.size());
  for (Index j = 0; j < mean.size(); ++j) {
    double v = var[j];
    if (!(v > kVarianceFloor)) {
      warn("diagonal_fit: dimension " + std::to_string(j) + " has zero variance; flooring");
      v = kVarianceFloor;
    }
    lower(j, j) = std::sqrt(v);
  }
  return std::make_unique<AffineMap>(mean, lower, true);
}

std::unique_ptr<AffineMap> dense_fit(const Matrix& samples) {
  auto block = fit_gaussian_block(samples);
  return std::make_unique<AffineMap>(block.mean, block.lower, false);
}

std::unique_ptr<Composite> rnvp_build(Index dim, Index context_dim, int n_blocks) {
  if (dim < 1) throw std::invalid_argument("rnvp_build: dimension must be positive");
  auto flow = std::make_unique<Composite>(dim, context_dim);
  flow->add(std::make_unique<ActNorm>(dim));
  for (int b = 0; b < n_blocks; ++b) {
    flow->add(std::make_unique<ActNorm>(dim));
    flow->add(std::make_unique<AffineCoupling>(dim, context_dim));
    flow->add(std::make_unique<Reverse>(dim));
  }
  return flow;
}

Vector flow_log_density(const Composite& flow, const Matrix& x, const Matrix& ctx) {
  Vector logdet;
  const Matrix z = flow.forward_checked(x, ctx, logdet);
  const double d = static_cast<double>(flow.dim());
  return (-0.5 * (z.rowwise().squaredNorm().array() + d * kLog2Pi)).matrix() + logdet;
}

// ---------------------------------------------------------------------------
// FactorizedPreconditioner

FactorizedPreconditioner::FactorizedPreconditioner(gaussianity::GaussianityReport report,
                                                   GaussianBlock block,
                                                   std::unique_ptr<Composite> flow)
    : dim_(static_cast<Index>(report.dim())), report_(std::move(report)), flow_(std::move(flow)) {
  const auto m = static_cast<Index>(report_.gaussian_set.size());
  const auto h = static_cast<Index>(report_.complement_set.size());
  if (m > 0) {
    if (block.mean.size() != m) throw std::invalid_argument("factorized: Gaussian block size");
    gaussian_ = std::make_unique<AffineMap>(block.mean, block.lower, false);
  }
  if (h > 0) {
    if (!flow_ || flow_->dim() != h || flow_->context_dim() != m)
      throw std::invalid_argument("factorized: conditional flow shape");
  } else {
    flow_.reset();
  }
}

FactorizedPreconditioner::FactorizedPreconditioner(const FactorizedPreconditioner& other)
    : dim_(other.dim_),
      report_(other.report_),
      gaussian_(other.gaussian_ ? std::make_unique<AffineMap>(*other.gaussian_) : nullptr),
      flow_(other.flow_ ? std::make_unique<Composite>(*other.flow_) : nullptr) {}

Matrix FactorizedPreconditioner::gaussian_part(const Matrix& x) const {
  return take_columns(x, report_.gaussian_set);
}

Matrix FactorizedPreconditioner::flow_part(const Matrix& x) const {
  return take_columns(x, report_.complement_set);
}

void FactorizedPreconditioner::scatter(const Matrix& g_part, const Matrix& h_part,
                                       Matrix& out) const {
  for (std::size_t k = 0; k < report_.gaussian_set.size(); ++k)
    out.col(report_.gaussian_set[k]) = g_part.col(static_cast<Index>(k));
  for (std::size_t k = 0; k < report_.complement_set.size(); ++k)
    out.col(report_.complement_set[k]) = h_part.col(static_cast<Index>(k));
}

Matrix FactorizedPreconditioner::forward(const Matrix& x, const Matrix&, Vector& logdet) const {
  const Matrix xg = gaussian_part(x);
  logdet.setZero(x.rows());
  Vector ld;
  Matrix zg = xg;
  if (gaussian_) {
    zg = gaussian_->forward(xg, Matrix(), ld);
    logdet += ld;
  }
  Matrix zh(x.rows(), 0);
  if (flow_) {
    zh = flow_->forward(flow_part(x), xg, ld);
    logdet += ld;
  }
  Matrix z(x.rows(), dim_);
  scatter(zg, zh, z);
  return z;
}

Matrix FactorizedPreconditioner::inverse(const Matrix& z, const Matrix&, Vector& logdet) const {
  logdet.setZero(z.rows());
  Vector ld;
  Matrix xg = gaussian_part(z);
  if (gaussian_) {
    xg = gaussian_->inverse(xg, Matrix(), ld);
    logdet += ld;
  }
  Matrix xh(z.rows(), 0);
  if (flow_) {
    xh = flow_->inverse(flow_part(z), xg, ld);
    logdet += ld;
  }
  Matrix x(z.rows(), dim_);
  scatter(xg, xh, x);
  return x;
}

Matrix FactorizedPreconditioner::inverse_vjp(const Matrix& z, const Matrix&, const Matrix& grad_x,
                                             const Vector& grad_logdet, Matrix*) const {
  const Matrix zg = gaussian_part(z);
  Vector ld;
  const Matrix xg = gaussian_ ? gaussian_->inverse(zg, Matrix(), ld) : zg;
  Matrix grad_xg = gaussian_part(grad_x);
  Matrix grad_zh(z.rows(), 0);
  if (flow_) {
    // x_G enters the conditional flow as context.
    grad_zh = flow_->inverse_vjp(flow_part(z), xg, flow_part(grad_x), grad_logdet, &grad_xg);
  }
  const Matrix grad_zg =
      gaussian_ ? gaussian_->inverse_vjp(zg, Matrix(), grad_xg, grad_logdet, nullptr) : grad_xg;
  Matrix grad_z(z.rows(), dim_);
  scatter(grad_zg, grad_zh, grad_z);
  return grad_z;
}

Matrix FactorizedPreconditioner::forward_vjp(const Matrix& x, const Matrix&, const Matrix& grad_z,
                                             const Vector& grad_logdet, Matrix*,
                                             Eigen::Ref<Vector> grad_params) const {
  const Matrix xg = gaussian_part(x);
  Matrix grad_xg = gaussian_ ? gaussian_->forward_vjp(xg, Matrix(), gaussian_part(grad_z),
                                                      grad_logdet, nullptr, grad_params)
                             : gaussian_part(grad_z);
  Matrix grad_xh(x.rows(), 0);
  if (flow_) {
    grad_xh = flow_->forward_vjp(flow_part(x), xg, flow_part(grad_z), grad_logdet, &grad_xg,
                                 grad_params);
  }
  Matrix grad_x(x.rows(), dim_);
  scatter(grad_xg, grad_xh, grad_x);
  return grad_x;
}

void FactorizedPreconditioner::set_params(const Eigen::Ref<const Vector>& p) {
  if (flow_) {
    flow_->set_params(p);
  } else {
    Bijection::set_params(p);
  }
}

std::vector<ParamSlice> FactorizedPreconditioner::param_slices() const {
  return flow_ ? flow_->param_slices() : std::vector<ParamSlice>{};
}

bool FactorizedPreconditioner::needs_initialization() const {
  return flow_ && flow_->needs_initialization();
}

void FactorizedPreconditioner::initialize(const Matrix& x, const Matrix&) {
  if (flow_) flow_->initialize(flow_part(x), gaussian_part(x));
}

Vector FactorizedPreconditioner::gaussian_log_density(const Matrix& x) const {
  if (!gaussian_) return Vector::Zero(x.rows());
  Vector ld;
  const Matrix zg = gaussian_->forward(gaussian_part(x), Matrix(), ld);
  const double m = static_cast<double>(zg.cols());
  return (-0.5 * (zg.rowwise().squaredNorm().array() + m * kLog2Pi)).matrix() + ld;
}

Vector FactorizedPreconditioner::conditional_log_density(const Matrix& x) const {
  if (!flow_) return Vector::Zero(x.rows());
  return flow_log_density(*flow_, flow_part(x), gaussian_part(x));
}

Vector FactorizedPreconditioner::log_density(const Matrix& x) const {
  Vector ld;
  const Matrix z = forward(x, Matrix(), ld);
  return (-0.5 * (z.rowwise().squaredNorm().array() + static_cast<double>(dim_) * kLog2Pi))
             .matrix() +
         ld;
}

nlohmann::json FactorizedPreconditioner::to_json() const {
  nlohmann::json j;
  j["kind"] = kind();
  j["dim"] = dim_;
  j["context_dim"] = 0;
  j["gaussian_set"] = report_.gaussian_set;
  j["complement_set"] = report_.complement_set;
  j["threshold"] = report_.threshold;
  j["constant"] = report_.constant;
  j["n"] = report_.n;
  std::vector<double> w2;
  for (double v : report_.w2) w2.push_back(std::isfinite(v) ? v : -1.0);  // -1 marks the sentinel
  j["w2"] = w2;
  j["gaussian_block"] = gaussian_ ? gaussian_->to_json() : nlohmann::json();
  j["conditional_flow"] = flow_ ? flow_->to_json() : nlohmann::json();
  return j;
}

std::unique_ptr<FactorizedPreconditioner> build_factorized(const Matrix& samples, double constant,
                                                           int n_blocks) {
  auto report = gaussianity::classify_dimensions(samples, constant);
  const auto m = static_cast<Index>(report.gaussian_set.size());
  const auto h = static_cast<Index>(report.complement_set.size());
  GaussianBlock block;
  if (m > 0) block = fit_gaussian_block(take_columns(samples, report.gaussian_set));
  std::unique_ptr<Composite> flow;
  if (h > 0) flow = rnvp_build(h, m, n_blocks);
  return std::make_unique<FactorizedPreconditioner>(std::move(report), std::move(block),
                                                    std::move(flow));
}

// ---------------------------------------------------------------------------
// Deserialization

namespace {

Vector flat_params(const nlohmann::json& j) {
  std::vector<double> all;
  for (const auto& s : j.at("params")) {
    const auto v = s.at("values").get<std::vector<double>>();
    all.insert(all.end(), v.begin(), v.end());
  }
  return Eigen::Map<const Vector>(all.data(), static_cast<Index>(all.size()));
}

}  // namespace

BijectionPtr bijection_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  const auto dim = j.at("dim").get<Index>();
  const auto ctx = j.value("context_dim", Index{0});
  if (kind == "identity") return std::make_unique<Identity>(dim);
  if (kind == "reverse") return std::make_unique<Reverse>(dim);
  if (kind == "actnorm") {
    auto a = std::make_unique<ActNorm>(dim);
    a->set_params(flat_params(j));
    a->set_initialized(j.value("initialized", true));
    return a;
  }
  if (kind == "affine_coupling") {
    auto c = std::make_unique<AffineCoupling>(dim, ctx);
    c->set_params(flat_params(j));
    return c;
  }
  if (kind == "composite") {
    auto c = std::make_unique<Composite>(dim, ctx);
    for (const auto& l : j.at("layers")) c->add(bijection_from_json(l));
    return c;
  }
  if (kind == "diagonal" || kind == "dense") {
    const auto& p = j.at("params");
    Vector mean = matrix_from(p.at(0).at("values"), 1, dim).row(0).transpose();
    Matrix lower = matrix_from(p.at(1).at("values"), dim, dim);
    return std::make_unique<AffineMap>(std::move(mean), std::move(lower), kind == "diagonal");
  }
  if (kind == "frnvp") {
    gaussianity::GaussianityReport report;
    report.gaussian_set = j.at("gaussian_set").get<std::vector<Index>>();
    report.complement_set = j.at("complement_set").get<std::vector<Index>>();
    report.threshold = j.at("threshold").get<double>();
    report.constant = j.at("constant").get<double>();
    report.n = j.at("n").get<std::size_t>();
    for (double v : j.at("w2").get<std::vector<double>>())
      report.w2.push_back(v < 0.0 ? gaussianity::kDegenerateDistance : v);
    GaussianBlock block;
    if (!j.at("gaussian_block").is_null()) {
      auto g = bijection_from_json(j.at("gaussian_block"));
      const auto& map = dynamic_cast<const AffineMap&>(*g);
      block.mean = map.mean();
      block.lower = map.lower();
    }
    std::unique_ptr<Composite> flow;
    if (!j.at("conditional_flow").is_null()) {
      auto f = bijection_from_json(j.at("conditional_flow"));
      flow.reset(dynamic_cast<Composite*>(f.release()));
    }
    return std::make_unique<FactorizedPreconditioner>(std::move(report), std::move(block),
                                                      std::move(flow));
  }
  throw std::invalid_argument("bijection_from_json: unknown kind '" + kind + "'");
}

}  // namespace flowprec::flows
