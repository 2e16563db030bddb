#include "flowprec/samplers.hpp"

#include <cmath>
#include <limits>

namespace flowprec::samplers {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double uniform(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

Vector draw_momentum(Index d, Rng& rng) {
  std::normal_distribution<double> normal;
  Vector p(d);
  for (Index i = 0; i < d; ++i) p[i] = normal(rng);
  return p;
}

}  // namespace

double preconditioned_logpdf(const Vector& z, const flows::Bijection& precond,
                             const targets::TargetModel& target, Vector& grad, Vector* x) {
  grad.resize(z.size());
  const Matrix zm = z.transpose();
  const Matrix ctx = flows::empty_context(1);
  Vector logdet;
  const Matrix xm = precond.inverse(zm, ctx, logdet);
  if (x) *x = xm.row(0).transpose();
  if (!xm.allFinite() || !std::isfinite(logdet[0])) {
    grad.setZero();
    return kNegInf;
  }
  Vector grad_x;
  const double lp = target.log_density(xm.row(0).transpose(), &grad_x);
  if (!std::isfinite(lp) || !grad_x.allFinite()) {
    grad.setZero();
    return kNegInf;
  }
  const Matrix gz = precond.inverse_vjp(zm, ctx, grad_x.transpose(), Vector::Ones(1), nullptr);
  grad = gz.row(0).transpose();
  if (!grad.allFinite()) {
    grad.setZero();
    return kNegInf;
  }
  return lp + logdet[0];
}

LogDensityFn latent_density(const flows::Bijection& precond, const targets::TargetModel& target) {
  return [&precond, &target](const Vector& z, Vector& grad) {
    return preconditioned_logpdf(z, precond, target, grad);
  };
}

bool leapfrog(PhasePoint& point, double step, int n_steps, const LogDensityFn& fn) {
  for (int s = 0; s < n_steps; ++s) {
    point.p += 0.5 * step * point.grad;
    point.z += step * point.p;
    point.logp = fn(point.z, point.grad);
    if (!std::isfinite(point.logp)) return false;
    point.p += 0.5 * step * point.grad;
  }
  return point.z.allFinite() && point.p.allFinite();
}

// ---------------------------------------------------------------------------

void DualAveraging::restart(double step) {
  if (!(step > 0.0)) throw std::invalid_argument("dual averaging: step must be positive");
  mu_ = std::log(10.0 * step);
  log_step_ = std::log(step);
  log_step_bar_ = 0.0;
  h_bar_ = 0.0;
  t_ = 0;
}

double DualAveraging::update(double error) {
  ++t_;
  const double t = static_cast<double>(t_);
  const double w = 1.0 / (t + kT0);
  h_bar_ = (1.0 - w) * h_bar_ + w * error;
  log_step_ = mu_ - std::sqrt(t) / kGamma * h_bar_;
  const double eta = std::pow(t, -kKappa);
  log_step_bar_ = eta * log_step_ + (1.0 - eta) * log_step_bar_;
  return std::exp(log_step_);
}

SamplerKind parse_sampler(const std::string& name) {
  if (name == "hmc") return SamplerKind::Hmc;
  if (name == "nuts") return SamplerKind::Nuts;
  throw std::invalid_argument("unknown sampler '" + name + "' (expected hmc or nuts)");
}

std::string to_string(SamplerKind kind) { return kind == SamplerKind::Hmc ? "hmc" : "nuts"; }

// ---------------------------------------------------------------------------

TransitionInfo hmc_step(ChainState& state, double step, int n_steps, double max_delta_h,
                        const LogDensityFn& fn, Rng& rng) {
  TransitionInfo info;
  PhasePoint point{state.z, draw_momentum(state.z.size(), rng), state.logp, state.grad};
  const double h0 = point.hamiltonian();
  const bool finite = leapfrog(point, step, n_steps, fn);
  info.n_leapfrog = n_steps;
  const double h1 = finite ? point.hamiltonian() : std::numeric_limits<double>::infinity();
  const double delta = h1 - h0;  // energy error
  info.divergent = !finite || !std::isfinite(delta) || delta > max_delta_h;
  info.accept_prob = info.divergent ? 0.0 : std::min(1.0, std::exp(-delta));
  // The uniform is always drawn so RNG consumption per step is fixed.
  const double u = uniform(rng);
  if (u < info.accept_prob) {
    info.accepted = true;
    state.z = std::move(point.z);
    state.logp = point.logp;
    state.grad = std::move(point.grad);
  }
  return info;
}

namespace {

struct NutsTree {
  const LogDensityFn& fn;
  Rng& rng;
  double step;
  double h0;
  double max_delta_h;
  int n_leapfrog = 0;
  double sum_metro_prob = 0.0;
  bool divergent = false;

  static bool no_uturn(const Vector& p_sharp_minus, const Vector& p_sharp_plus, const Vector& rho) {
    return p_sharp_plus.dot(rho) > 0.0 && p_sharp_minus.dot(rho) > 0.0;
  }

  // Extends the trajectory from `frontier` by 2^depth leapfrog steps in the
  // direction of sign. Returns false on divergence or an internal U-turn.
  bool build(int depth, PhasePoint& frontier, PhasePoint& propose, Vector& p_sharp_beg,
             Vector& p_sharp_end, Vector& rho, Vector& p_beg, Vector& p_end, double sign,
             double& log_sum_weight) {
    if (depth == 0) {
      const bool finite = leapfrog(frontier, sign * step, 1, fn);
      ++n_leapfrog;
      double h = finite ? frontier.hamiltonian() : std::numeric_limits<double>::infinity();
      if (std::isnan(h)) h = std::numeric_limits<double>::infinity();
      if (h - h0 > max_delta_h) divergent = true;
      log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
      sum_metro_prob += h0 - h > 0.0 ? 1.0 : std::exp(h0 - h);
      propose = frontier;
      p_sharp_beg = frontier.p;
      p_sharp_end = p_sharp_beg;
      rho += frontier.p;
      p_beg = frontier.p;
      p_end = p_beg;
      return !divergent;
    }

    const Index d = frontier.z.size();
    Vector p_sharp_init_end(d), p_init_end(d);
    Vector rho_init = Vector::Zero(d);
    double log_sum_weight_init = kNegInf;
    if (!build(depth - 1, frontier, propose, p_sharp_beg, p_sharp_init_end, rho_init, p_beg,
               p_init_end, sign, log_sum_weight_init))
      return false;

    PhasePoint propose_final = frontier;
    Vector p_sharp_final_beg(d), p_final_beg(d);
    Vector rho_final = Vector::Zero(d);
    double log_sum_weight_final = kNegInf;
    if (!build(depth - 1, frontier, propose_final, p_sharp_final_beg, p_sharp_end, rho_final,
               p_final_beg, p_end, sign, log_sum_weight_final))
      return false;

    const double log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
    log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);
    if (log_sum_weight_final > log_sum_weight_subtree) {
      propose = std::move(propose_final);
    } else if (uniform(rng) < std::exp(log_sum_weight_final - log_sum_weight_subtree)) {
      propose = std::move(propose_final);
    }

    const Vector rho_subtree = rho_init + rho_final;
    rho += rho_subtree;
    bool persist = no_uturn(p_sharp_beg, p_sharp_end, rho_subtree);
    persist = persist && no_uturn(p_sharp_beg, p_sharp_final_beg, rho_init + p_final_beg);
    persist = persist && no_uturn(p_sharp_init_end, p_sharp_end, rho_final + p_init_end);
    return persist;
  }
};

}  // namespace

TransitionInfo nuts_step(ChainState& state, double step, int max_depth, double max_delta_h,
                         const LogDensityFn& fn, Rng& rng) {
  TransitionInfo info;
  info.accepted = true;
  PhasePoint start{state.z, draw_momentum(state.z.size(), rng), state.logp, state.grad};
  NutsTree tree{fn, rng, step, start.hamiltonian(), max_delta_h};

  PhasePoint z_fwd = start;
  PhasePoint z_bck = start;
  PhasePoint sample = start;
  PhasePoint propose = start;

  Vector p_fwd_fwd = start.p, p_sharp_fwd_fwd = start.p;
  Vector p_fwd_bck = start.p, p_sharp_fwd_bck = start.p;
  Vector p_bck_fwd = start.p, p_sharp_bck_fwd = start.p;
  Vector p_bck_bck = start.p, p_sharp_bck_bck = start.p;
  Vector rho = start.p;
  double log_sum_weight = 0.0;  // the initial point has weight exp(0)
  const Index d = start.z.size();

  int depth = 0;
  while (depth < max_depth) {
    Vector rho_fwd = Vector::Zero(d);
    Vector rho_bck = Vector::Zero(d);
    double log_sum_weight_subtree = kNegInf;
    bool valid;
    if (uniform(rng) > 0.5) {
      rho_bck = rho;
      p_bck_fwd = p_fwd_bck;
      p_sharp_bck_fwd = p_sharp_fwd_bck;
      valid = tree.build(depth, z_fwd, propose, p_sharp_fwd_bck, p_sharp_fwd_fwd, rho_fwd,
                         p_fwd_bck, p_fwd_fwd, 1.0, log_sum_weight_subtree);
    } else {
      rho_fwd = rho;
      p_fwd_bck = p_bck_fwd;
      p_sharp_fwd_bck = p_sharp_bck_fwd;
      valid = tree.build(depth, z_bck, propose, p_sharp_bck_fwd, p_sharp_bck_bck, rho_bck,
                         p_bck_fwd, p_bck_bck, -1.0, log_sum_weight_subtree);
    }
    if (!valid) break;
    ++depth;

    if (log_sum_weight_subtree > log_sum_weight) {
      sample = propose;
    } else if (uniform(rng) < std::exp(log_sum_weight_subtree - log_sum_weight)) {
      sample = propose;
    }
    log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

    rho = rho_bck + rho_fwd;
    bool persist = NutsTree::no_uturn(p_sharp_bck_bck, p_sharp_fwd_fwd, rho);
    persist = persist && NutsTree::no_uturn(p_sharp_bck_bck, p_sharp_fwd_bck, rho_bck + p_fwd_bck);
    persist = persist && NutsTree::no_uturn(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_fwd + p_bck_fwd);
    if (!persist) break;
  }

  info.tree_depth = depth;
  info.n_leapfrog = tree.n_leapfrog;
  info.divergent = tree.divergent;
  info.accept_prob =
      tree.n_leapfrog > 0 ? tree.sum_metro_prob / static_cast<double>(tree.n_leapfrog) : 1.0;
  state.z = std::move(sample.z);
  state.logp = sample.logp;
  state.grad = std::move(sample.grad);
  return info;
}

TransitionInfo transition(ChainState& state, double step, const SamplerConfig& config,
                          const LogDensityFn& fn, Rng& rng) {
  if (config.kind == SamplerKind::Hmc)
    return hmc_step(state, step, config.leapfrog_steps, config.max_delta_h, fn, rng);
  return nuts_step(state, step, config.max_depth, config.max_delta_h, fn, rng);
}

ChainEnsemble make_ensemble(std::size_t chains, Index dim, double initial_step,
                            std::uint64_t seed) {
  ChainEnsemble e;
  std::uniform_real_distribution<double> box(-2.0, 2.0);
  for (std::size_t c = 0; c < chains; ++c) {
    e.rngs.push_back(make_rng(seed, 1 + c));
    ChainState s;
    s.z.resize(dim);
    for (Index i = 0; i < dim; ++i) s.z[i] = box(e.rngs.back());
    s.grad = Vector::Zero(dim);
    e.chains.push_back(std::move(s));
    e.step_sizes.push_back(initial_step);
    e.dual.emplace_back(initial_step);
  }
  return e;
}

void refresh(ChainEnsemble& ensemble, const LogDensityFn& fn) {
  for (auto& c : ensemble.chains) c.logp = fn(c.z, c.grad);
}

}  // namespace flowprec::samplers
