#include "flowprec/diagnostics.hpp"

#include "flowprec/math.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flowprec::diagnostics {

namespace {

void check_shape(const Draws& draws) {
  if (draws.size() < 2) throw std::invalid_argument("ess: need at least 2 chains");
  const Index t = draws.front().rows();
  if (t < 4) throw std::invalid_argument("ess: need at least 4 draws per chain");
  for (const auto& c : draws)
    if (c.rows() != t || c.cols() != draws.front().cols())
      throw std::invalid_argument("ess: chains differ in shape");
}

bool is_constant(const Matrix& sims) {
  return (sims.array() == sims(0, 0)).all();
}

// Type-7 quantile of the pooled values.
double quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double quantile_ess(const Matrix& split, double p) {
  std::vector<double> pooled(split.data(), split.data() + split.size());
  const double q = quantile(std::move(pooled), p);
  const Matrix indicator = (split.array() <= q).cast<double>();
  return ess_raw(indicator);
}

}  // namespace

double ess_raw(const Matrix& sims) {
  const Index n = sims.rows();
  const Index m = sims.cols();
  if (n < 4 || m < 1) throw std::invalid_argument("ess_raw: need >= 4 draws");
  if (!sims.allFinite()) return std::numeric_limits<double>::quiet_NaN();
  if (is_constant(sims)) return 0.0;

  const Eigen::RowVectorXd chain_mean = sims.colwise().mean();
  const Matrix centred = sims.rowwise() - chain_mean;
  const double dn = static_cast<double>(n);
  // Mean over chains of the biased lag-t autocovariance.
  auto mean_acov = [&](Index lag) {
    double s = 0.0;
    for (Index c = 0; c < m; ++c)
      s += centred.col(c).head(n - lag).dot(centred.col(c).tail(n - lag));
    return s / dn / static_cast<double>(m);
  };

  const double acov0 = mean_acov(0);
  const double mean_var = acov0 * dn / (dn - 1.0);
  double var_plus = mean_var * (dn - 1.0) / dn;
  if (m > 1) {
    const double mu = chain_mean.mean();
    var_plus += (chain_mean.array() - mu).square().sum() / static_cast<double>(m - 1);
  }

  std::vector<double> rho(static_cast<std::size_t>(n), 0.0);
  rho[0] = 1.0;
  double rho_even = 1.0;
  double rho_odd = 1.0 - (mean_var - mean_acov(1)) / var_plus;
  rho[1] = rho_odd;
  Index t = 0;
  while (t < n - 5 && std::isfinite(rho_even + rho_odd) && rho_even + rho_odd > 0.0) {
    t += 2;
    rho_even = 1.0 - (mean_var - mean_acov(t)) / var_plus;
    rho_odd = 1.0 - (mean_var - mean_acov(t + 1)) / var_plus;
    if (rho_even + rho_odd >= 0.0) {
      rho[static_cast<std::size_t>(t)] = rho_even;
      rho[static_cast<std::size_t>(t + 1)] = rho_odd;
    }
  }
  const Index max_t = t;
  if (rho_even > 0.0) rho[static_cast<std::size_t>(max_t)] = rho_even;

  // Geyer's initial monotone sequence.
  for (Index u = 2; u <= max_t - 2; u += 2) {
    const auto i = static_cast<std::size_t>(u);
    if (rho[i] + rho[i + 1] > rho[i - 2] + rho[i - 1]) {
      rho[i] = 0.5 * (rho[i - 2] + rho[i - 1]);
      rho[i + 1] = rho[i];
    }
  }

  const double total = dn * static_cast<double>(m);
  double tau = -1.0 + rho[static_cast<std::size_t>(max_t)];
  for (Index u = 0; u < max_t; ++u) tau += 2.0 * rho[static_cast<std::size_t>(u)];
  tau = std::max(tau, 1.0 / std::log10(total));
  return total / tau;
}

Matrix rank_normalize(const Matrix& sims) {
  const Index total = sims.size();
  std::vector<Index> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), Index{0});
  const double* v = sims.data();
  std::stable_sort(order.begin(), order.end(), [v](Index a, Index b) { return v[a] < v[b]; });
  Matrix out(sims.rows(), sims.cols());
  double* o = out.data();
  const double denom = static_cast<double>(total) + 0.25;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    const double z = inverse_normal_cdf((avg_rank - 0.375) / denom);
    for (std::size_t k = i; k <= j; ++k) o[order[k]] = z;
    i = j + 1;
  }
  return out;
}

Matrix split_chains(const Matrix& sims) {
  const Index n = sims.rows();
  const Index half = n / 2;
  Matrix out(half, 2 * sims.cols());
  for (Index c = 0; c < sims.cols(); ++c) {
    out.col(2 * c) = sims.col(c).head(half);
    out.col(2 * c + 1) = sims.col(c).tail(half);
  }
  return out;
}

Matrix coordinate(const Draws& draws, Index d) {
  Matrix out(draws.front().rows(), static_cast<Index>(draws.size()));
  for (std::size_t c = 0; c < draws.size(); ++c) out.col(static_cast<Index>(c)) = draws[c].col(d);
  return out;
}

Vector bulk_ess(const Draws& draws) {
  check_shape(draws);
  const Index dim = draws.front().cols();
  Vector out(dim);
  for (Index d = 0; d < dim; ++d) {
    const Matrix split = split_chains(coordinate(draws, d));
    if (is_constant(split)) {
      warn("bulk_ess: coordinate " + std::to_string(d) + " is constant; reporting 0");
      out[d] = 0.0;
      continue;
    }
    out[d] = ess_raw(rank_normalize(split));
  }
  return out;
}

Vector tail_ess(const Draws& draws) {
  check_shape(draws);
  const Index dim = draws.front().cols();
  Vector out(dim);
  for (Index d = 0; d < dim; ++d) {
    const Matrix split = split_chains(coordinate(draws, d));
    if (is_constant(split)) {
      warn("tail_ess: coordinate " + std::to_string(d) + " is constant; reporting 0");
      out[d] = 0.0;
      continue;
    }
    out[d] = std::min(quantile_ess(split, 0.05), quantile_ess(split, 0.95));
  }
  return out;
}

EssReport ess_report(const Draws& draws) {
  EssReport r;
  r.bulk = bulk_ess(draws);
  r.tail = tail_ess(draws);
  r.min_bulk = r.bulk.minCoeff();
  r.min_tail = r.tail.minCoeff();
  r.chains = draws.size();
  r.steps = draws.front().rows();
  return r;
}

// ---------------------------------------------------------------------------

Kernel parse_kernel(const std::string& name) {
  if (name == "imq") return Kernel::Imq;
  if (name == "rbf") return Kernel::Rbf;
  throw std::invalid_argument("unknown kernel '" + name + "' (expected imq or rbf)");
}

std::string to_string(Kernel k) { return k == Kernel::Imq ? "imq" : "rbf"; }

double median_bandwidth(const Matrix& points) {
  const Index n = points.rows();
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) dist.push_back((points.row(i) - points.row(j)).norm());
  if (dist.empty()) return 1.0;
  const auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  double med = *mid;
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), mid);
    med = 0.5 * (med + lower);
  }
  return med > 0.0 ? med : 1.0;
}

double ksd_vstat(const Matrix& points, const Matrix& scores, Kernel kernel, double bandwidth) {
  const Index n = points.rows();
  const double d = static_cast<double>(points.cols());
  const double h2 = bandwidth * bandwidth;
  const Matrix gram = points * points.transpose();
  const Matrix score_dot = scores * scores.transpose();
  const Matrix score_point = scores * points.transpose();  // (i, j) = s_i . x_j
  double sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const double r2 = std::max(0.0, gram(i, i) + gram(j, j) - 2.0 * gram(i, j));
      // (s_i - s_j) . (x_i - x_j)
      const double sr = score_point(i, i) - score_point(i, j) - score_point(j, i) + score_point(j, j);
      double u;
      if (kernel == Kernel::Rbf) {
        const double k = std::exp(-0.5 * r2 / h2);
        u = k * (score_dot(i, j) + sr / h2 + d / h2 - r2 / (h2 * h2));
      } else {
        constexpr double beta = -0.5;
        const double q = 1.0 + r2 / h2;
        const double qb = std::pow(q, beta);
        const double qb1 = qb / q;
        const double qb2 = qb1 / q;
        u = score_dot(i, j) * qb - 2.0 * beta * qb1 / h2 * sr -
            2.0 * beta / h2 * (d * qb1 + 2.0 * (beta - 1.0) * qb2 * r2 / h2);
      }
      sum += u;
    }
  }
  return sum / static_cast<double>(n * n);
}

KsdEstimate ksd(const Matrix& draws, const std::function<Vector(const Vector&)>& score,
                const KsdConfig& config) {
  const Index n = draws.rows();
  if (n < 2) throw std::invalid_argument("ksd: need at least 2 draws");
  if (config.trials < 1 || config.subsample < 2)
    throw std::invalid_argument("ksd: trials >= 1 and subsample >= 2 required");
  Matrix scores(n, draws.cols());
  for (Index i = 0; i < n; ++i) scores.row(i) = score(draws.row(i).transpose()).transpose();

  KsdEstimate est;
  est.kernel = config.kernel;
  est.trials = config.trials;
  est.subsample_size = std::min(config.subsample, n);
  Rng rng = make_rng(config.seed, 0x4b5d);
  std::vector<Index> idx(static_cast<std::size_t>(n));
  double total = 0.0;
  double bandwidth_total = 0.0;
  for (int trial = 0; trial < config.trials; ++trial) {
    std::iota(idx.begin(), idx.end(), Index{0});
    // Partial Fisher-Yates: the first m entries are a uniform subset.
    for (Index i = 0; i < est.subsample_size; ++i) {
      const Index j = std::uniform_int_distribution<Index>(i, n - 1)(rng);
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    const std::vector<Index> pick(idx.begin(), idx.begin() + est.subsample_size);
    const Matrix pts = draws(pick, Eigen::all);
    const Matrix sc = scores(pick, Eigen::all);
    const double h = median_bandwidth(pts);
    bandwidth_total += h;
    total += std::sqrt(std::max(0.0, ksd_vstat(pts, sc, config.kernel, h)));
  }
  est.value = total / config.trials;
  est.bandwidth = bandwidth_total / config.trials;
  return est;
}

Matrix pool(const Draws& draws) {
  Index rows = 0;
  for (const auto& c : draws) rows += c.rows();
  Matrix out(rows, draws.empty() ? 0 : draws.front().cols());
  Index r = 0;
  for (const auto& c : draws) {
    out.middleRows(r, c.rows()) = c;
    r += c.rows();
  }
  return out;
}

}  // namespace flowprec::diagnostics
