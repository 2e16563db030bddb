#ifndef FLOWPREC_SAMPLERS_HPP
#define FLOWPREC_SAMPLERS_HPP

#include "flowprec/flows.hpp"
#include "flowprec/targets.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace flowprec::samplers {

/// Returns log p(z) and writes its gradient into the second argument.
/// Returns -inf when the density cannot be evaluated.
using LogDensityFn = std::function<double(const Vector&, Vector&)>;

/// Latent-space density rho(z) = pi(f^-1(z)) |det J_{f^-1}(z)| and its
/// gradient. Writes the target-space point to *x when non-null. Non-finite
/// intermediates give -inf, so proposals there are rejected.
double preconditioned_logpdf(const Vector& z, const flows::Bijection& precond,
                             const targets::TargetModel& target, Vector& grad,
                             Vector* x = nullptr);

LogDensityFn latent_density(const flows::Bijection& precond, const targets::TargetModel& target);

/// Position, momentum and cached density evaluation.
struct PhasePoint {
  Vector z;
  Vector p;
  double logp = 0.0;
  Vector grad;

  double hamiltonian() const { return -logp + 0.5 * p.squaredNorm(); }
};

/// Kick-drift-kick leapfrog with identity mass. Returns false if the
/// trajectory produced a non-finite position, momentum or density.
bool leapfrog(PhasePoint& point, double step, int n_steps, const LogDensityFn& fn);

/// Nesterov dual averaging of log step size. The error convention is
/// target_accept - observed, so rejections shrink the step.
class DualAveraging {
 public:
  static constexpr double kGamma = 0.05;
  static constexpr double kKappa = 0.75;
  static constexpr double kT0 = 10.0;

  explicit DualAveraging(double initial_step = 0.01) { restart(initial_step); }

  /// Re-centres the recursion at mu = log(10 * step) with fresh averages.
  void restart(double step);
  /// Applies one update and returns the new step size.
  double update(double error);

  double step() const { return std::exp(log_step_); }
  double averaged_step() const { return std::exp(log_step_bar_); }
  double mu() const { return mu_; }
  double h_bar() const { return h_bar_; }
  std::int64_t iterations() const { return t_; }

 private:
  double mu_ = 0.0;
  double log_step_ = 0.0;
  double log_step_bar_ = 0.0;
  double h_bar_ = 0.0;
  std::int64_t t_ = 0;
};

enum class SamplerKind { Hmc, Nuts };
SamplerKind parse_sampler(const std::string& name);
std::string to_string(SamplerKind kind);

struct SamplerConfig {
  SamplerKind kind = SamplerKind::Hmc;
  int leapfrog_steps = 20;
  int max_depth = 10;
  double initial_step = 0.01;
  double target_accept = 0.8;
  double max_delta_h = 1000.0;
};

struct ChainState {
  Vector z;
  double logp = 0.0;
  Vector grad;
};

/// Per-transition record.
struct TransitionInfo {
  bool accepted = false;
  /// HMC: min(1, exp(-dH)). NUTS: mean Metropolis probability over the tree.
  double accept_prob = 0.0;
  bool divergent = false;
  int tree_depth = 0;
  int n_leapfrog = 0;
};

/// Gaussian momentum refresh, leapfrog, Metropolis-Hastings test. A
/// divergent trajectory is rejected with probability 0 of acceptance;
/// rejection leaves `state` untouched.
TransitionInfo hmc_step(ChainState& state, double step, int n_steps, double max_delta_h,
                        const LogDensityFn& fn, Rng& rng);

/// No-U-turn transition with multinomial sampling over the trajectory and
/// the generalized U-turn criterion with extra checks across subtrees.
TransitionInfo nuts_step(ChainState& state, double step, int max_depth, double max_delta_h,
                         const LogDensityFn& fn, Rng& rng);

TransitionInfo transition(ChainState& state, double step, const SamplerConfig& config,
                          const LogDensityFn& fn, Rng& rng);

/// k chains in latent space, each with its own step size, dual-averaging
/// state and RNG stream keyed by (seed, chain index).
struct ChainEnsemble {
  std::vector<ChainState> chains;
  std::vector<double> step_sizes;
  std::vector<DualAveraging> dual;
  std::vector<Rng> rngs;

  std::size_t size() const { return chains.size(); }
  Index dim() const { return chains.empty() ? 0 : chains.front().z.size(); }
};

/// Initial latent states IID Uniform(-2, 2) per coordinate.
ChainEnsemble make_ensemble(std::size_t chains, Index dim, double initial_step,
                            std::uint64_t seed);

/// Re-evaluates every chain's cached density under `fn`.
void refresh(ChainEnsemble& ensemble, const LogDensityFn& fn);

}  // namespace flowprec::samplers

#endif  // FLOWPREC_SAMPLERS_HPP
