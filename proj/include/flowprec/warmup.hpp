#ifndef FLOWPREC_WARMUP_HPP
#define FLOWPREC_WARMUP_HPP

#include "flowprec/flows.hpp"
#include "flowprec/samplers.hpp"
#include "flowprec/targets.hpp"
#include "flowprec/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace flowprec::warmup {

/// Fixed-capacity uniform subsample of a stream (classical reservoir
/// sampling: once full, the (seen+1)-th item replaces a uniformly chosen slot
/// with probability capacity / (seen + 1)).
class Reservoir {
 public:
  explicit Reservoir(std::size_t capacity = 15000);

  void offer(const Eigen::Ref<const Vector>& x, Rng& rng);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  std::uint64_t seen() const { return seen_; }
  const std::vector<Vector>& items() const { return items_; }
  /// Items as rows.
  Matrix matrix() const;

 private:
  std::size_t capacity_;
  std::uint64_t seen_ = 0;
  std::vector<Vector> items_;
};

enum class PreconditionerKind { Identity, Diagonal, Dense, Rnvp, Frnvp };
PreconditionerKind parse_preconditioner(const std::string& name);
std::string to_string(PreconditionerKind kind);

struct WarmupConfig {
  int cycles = 5;
  int steps_per_cycle = 1000;
  std::size_t chains = 100;
  std::size_t reservoir_capacity = 15000;
  samplers::SamplerConfig sampler;
  double gaussianity_constant = 0.1;
  PreconditionerKind kind = PreconditionerKind::Frnvp;
  int flow_blocks = 2;
  training::TrainConfig train;
  unsigned workers = 1;  // threads advancing chains; results do not depend on it

  void validate() const;
};

struct WarmupResult {
  samplers::ChainEnsemble ensemble;
  flows::BijectionPtr preconditioner;
  Reservoir reservoir;
  std::vector<nlohmann::json> log;  // one record per cycle
};

/// Moves every chain to the latent space of `to` through its target point,
/// z <- to(from^-1(z)). Throws NonFiniteError and leaves the chains untouched
/// when any image is not finite. Cached densities are not refreshed.
void remap_chains(samplers::ChainEnsemble& ensemble, const flows::Bijection& from,
                  const flows::Bijection& to);

/// Cycle 1 runs with the identity, cycle 2 with a diagonal fit, later cycles
/// with the configured kind (identity stays identity throughout). Within a
/// cycle the first ceil(n/2) steps adapt step sizes by dual averaging and
/// the rest, at the frozen averaged step size, offer f^-1(z) to the
/// reservoir in (step, chain) order. Nothing is refit after the last cycle.
WarmupResult run_warmup(const targets::TargetModel& target, const WarmupConfig& config,
                        std::uint64_t seed);

struct SamplingStats {
  double accept_rate = 0.0;  // mean accept probability
  std::size_t divergences = 0;
  std::size_t max_depth_hits = 0;
};

/// Fixed step sizes and preconditioner. Every visited latent state is mapped
/// through f^-1; returns one (iterations x dim) matrix per chain.
Draws run_sampling(samplers::ChainEnsemble& ensemble, const flows::Bijection& preconditioner,
                   const targets::TargetModel& target, const samplers::SamplerConfig& sampler,
                   int iterations, unsigned workers = 1, SamplingStats* stats = nullptr);

}  // namespace flowprec::warmup

#endif  // FLOWPREC_WARMUP_HPP
