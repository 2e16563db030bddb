#include "flowprec/warmup.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

namespace flowprec::warmup {

using flows::Bijection;
using flows::BijectionPtr;
using samplers::ChainEnsemble;
using samplers::LogDensityFn;

namespace {

// Runs body(i) for i in [0, n) on up to `workers` threads. Each index is
// handled by exactly one thread, so per-index work stays deterministic.
template <class F>
void parallel_for(std::size_t n, unsigned workers, F&& body) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct HalfStats {
  double accepted = 0.0;
  double accept_prob = 0.0;
  std::size_t divergences = 0;
  std::vector<Vector> collected;  // target-space points, in step order
};

HalfStats run_half(ChainEnsemble& e, std::size_t c, int steps, bool tune, const LogDensityFn& fn,
                   const Bijection& precond, const samplers::SamplerConfig& sampler) {
  HalfStats out;
  auto& chain = e.chains[c];
  if (tune) e.dual[c].restart(e.step_sizes[c]);
  for (int s = 0; s < steps; ++s) {
    const auto info = samplers::transition(chain, e.step_sizes[c], sampler, fn, e.rngs[c]);
    out.accepted += info.accepted ? 1.0 : 0.0;
    out.accept_prob += info.accept_prob;
    out.divergences += info.divergent ? 1 : 0;
    if (tune) {
      // HMC uses the binary accept flag; NUTS always moves, so its mean
      // Metropolis probability stands in for the flag.
      const double observed = sampler.kind == samplers::SamplerKind::Hmc
                                  ? (info.accepted ? 1.0 : 0.0)
                                  : info.accept_prob;
      const double next = e.dual[c].update(sampler.target_accept - observed);
      if (std::isfinite(next) && next > 0.0) e.step_sizes[c] = next;
    } else {
      out.collected.push_back(precond.inverse_point(chain.z));
    }
  }
  if (tune) {
    const double averaged = e.dual[c].averaged_step();
    if (std::isfinite(averaged) && averaged > 0.0) e.step_sizes[c] = averaged;
  }
  return out;
}

nlohmann::json thinned_trace(const training::TrainTrace& trace) {
  auto out = nlohmann::json::array();
  const std::size_t n = trace.loss.size();
  const std::size_t stride = std::max<std::size_t>(1, (n + 349) / 350);
  for (std::size_t i = 0; i < n; i += stride) out.push_back({i + 1, trace.loss[i]});
  if (n > 0 && (n - 1) % stride != 0) out.push_back({n, trace.loss.back()});
  return out;
}

struct FitState {
  std::unique_ptr<flows::Composite> rnvp;  // persists across cycles
  training::OptimizerState rnvp_optimizer;
};

BijectionPtr fit_preconditioner(PreconditionerKind kind, const Matrix& data,
                                const WarmupConfig& config, std::uint64_t train_seed,
                                FitState& state, nlohmann::json& record) {
  record["kind"] = to_string(kind);
  record["rows"] = data.rows();
  training::TrainConfig tc = config.train;
  tc.seed = train_seed;
  switch (kind) {
    case PreconditionerKind::Identity:
      return std::make_unique<flows::Identity>(data.cols());
    case PreconditionerKind::Diagonal:
      return flows::diagonal_fit(data);
    case PreconditionerKind::Dense: {
      auto map = flows::dense_fit(data);
      return map;
    }
    case PreconditionerKind::Rnvp: {
      if (!state.rnvp) state.rnvp = flows::rnvp_build(data.cols(), 0, config.flow_blocks);
      const auto trace = training::fit_flow(*state.rnvp, data, flows::empty_context(data.rows()),
                                            tc, state.rnvp_optimizer);
      record["loss"] = thinned_trace(trace);
      record["diverged"] = trace.diverged;
      record["optimizer_steps"] = state.rnvp_optimizer.step_count;
      return state.rnvp->clone();
    }
    case PreconditionerKind::Frnvp: {
      auto model = flows::build_factorized(data, config.gaussianity_constant, config.flow_blocks);
      record["gaussian_dims"] = model->gaussian_indices().size();
      record["gaussian_set"] = model->gaussian_indices();
      record["threshold"] = model->report().threshold;
      if (auto* flow = model->conditional_flow()) {
        // The Gaussian block is closed-form, so only the conditional flow is
        // trained; the joint loss is the logged loss plus gaussian_nll.
        training::OptimizerState fresh;
        const auto trace = training::fit_flow(*flow, model->flow_part(data),
                                              model->gaussian_part(data), tc, fresh);
        record["loss"] = thinned_trace(trace);
        record["diverged"] = trace.diverged;
      }
      if (!model->gaussian_indices().empty())
        record["gaussian_nll"] = -model->gaussian_log_density(data).mean();
      return model;
    }
  }
  throw std::logic_error("unreachable preconditioner kind");
}

}  // namespace

// ---------------------------------------------------------------------------

Reservoir::Reservoir(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("reservoir capacity must be positive");
  items_.reserve(std::min<std::size_t>(capacity, 1 << 16));
}

void Reservoir::offer(const Eigen::Ref<const Vector>& x, Rng& rng) {
  ++seen_;
  if (items_.size() < capacity_) {
    items_.emplace_back(x);
    return;
  }
  // Accept with probability capacity / seen, then overwrite a uniform slot.
  const std::uint64_t j = std::uniform_int_distribution<std::uint64_t>(0, seen_ - 1)(rng);
  if (j < capacity_) {
    const auto slot = std::uniform_int_distribution<std::size_t>(0, capacity_ - 1)(rng);
    items_[slot] = x;
  }
}

Matrix Reservoir::matrix() const {
  if (items_.empty()) return {};
  Matrix m(static_cast<Index>(items_.size()), items_.front().size());
  for (std::size_t i = 0; i < items_.size(); ++i) m.row(static_cast<Index>(i)) = items_[i];
  return m;
}

PreconditionerKind parse_preconditioner(const std::string& name) {
  if (name == "identity") return PreconditionerKind::Identity;
  if (name == "diagonal") return PreconditionerKind::Diagonal;
  if (name == "dense") return PreconditionerKind::Dense;
  if (name == "rnvp") return PreconditionerKind::Rnvp;
  if (name == "frnvp") return PreconditionerKind::Frnvp;
  throw std::invalid_argument("unknown preconditioner '" + name +
                              "' (expected identity, diagonal, dense, rnvp or frnvp)");
}

std::string to_string(PreconditionerKind kind) {
  switch (kind) {
    case PreconditionerKind::Identity: return "identity";
    case PreconditionerKind::Diagonal: return "diagonal";
    case PreconditionerKind::Dense: return "dense";
    case PreconditionerKind::Rnvp: return "rnvp";
    case PreconditionerKind::Frnvp: return "frnvp";
  }
  return "unknown";
}

void WarmupConfig::validate() const {
  if (cycles < 1) throw std::invalid_argument("warmup.cycles must be >= 1");
  if (steps_per_cycle < 2) throw std::invalid_argument("warmup.steps_per_cycle must be >= 2");
  if (chains < 1) throw std::invalid_argument("warmup.chains must be >= 1");
  if (reservoir_capacity < 2) throw std::invalid_argument("warmup.reservoir must be >= 2");
  if (!(sampler.target_accept > 0.0 && sampler.target_accept < 1.0))
    throw std::invalid_argument("sampler.target_accept must lie in (0, 1)");
  if (sampler.leapfrog_steps < 1) throw std::invalid_argument("sampler.leapfrog_steps must be >= 1");
  if (sampler.max_depth < 0) throw std::invalid_argument("sampler.max_depth must be >= 0");
  if (!(sampler.initial_step > 0.0)) throw std::invalid_argument("sampler.initial_step must be > 0");
  if (flow_blocks < 1) throw std::invalid_argument("flow.blocks must be >= 1");
  if (train.epochs < 1) throw std::invalid_argument("training.epochs must be >= 1");
}

void remap_chains(ChainEnsemble& ensemble, const Bijection& from, const Bijection& to) {
  const std::size_t k = ensemble.size();
  Matrix z_old(static_cast<Index>(k), ensemble.dim());
  for (std::size_t c = 0; c < k; ++c) z_old.row(static_cast<Index>(c)) = ensemble.chains[c].z;
  Vector ld;
  const Matrix x = from.inverse(z_old, flows::empty_context(z_old.rows()), ld);
  const Matrix z_new = to.forward(x, flows::empty_context(x.rows()), ld);
  if (!z_new.allFinite()) throw NonFiniteError("chain remap produced non-finite states");
  for (std::size_t c = 0; c < k; ++c) ensemble.chains[c].z = z_new.row(static_cast<Index>(c));
}

WarmupResult run_warmup(const targets::TargetModel& target, const WarmupConfig& config,
                        std::uint64_t seed) {
  config.validate();
  const Index dim = target.dim();
  WarmupResult result{samplers::make_ensemble(config.chains, dim, config.sampler.initial_step, seed),
                      std::make_unique<flows::Identity>(dim), Reservoir(config.reservoir_capacity),
                      {}};
  auto& ensemble = result.ensemble;
  Rng reservoir_rng = make_rng(seed, 0x5e5e5e);
  FitState fit_state;
  const int tune_steps = (config.steps_per_cycle + 1) / 2;
  const int collect_steps = config.steps_per_cycle - tune_steps;
  const std::size_t k = ensemble.size();

  for (int cycle = 1; cycle <= config.cycles; ++cycle) {
    const Bijection& precond = *result.preconditioner;
    const LogDensityFn fn = samplers::latent_density(precond, target);
    samplers::refresh(ensemble, fn);

    nlohmann::json record;
    record["cycle"] = cycle;
    record["preconditioner"] = precond.kind();

    std::vector<HalfStats> tune(k), collect(k);
    parallel_for(k, config.workers, [&](std::size_t c) {
      tune[c] = run_half(ensemble, c, tune_steps, true, fn, precond, config.sampler);
    });
    parallel_for(k, config.workers, [&](std::size_t c) {
      collect[c] = run_half(ensemble, c, collect_steps, false, fn, precond, config.sampler);
    });
    // Single writer, deterministic (step, chain) order.
    for (int s = 0; s < collect_steps; ++s)
      for (std::size_t c = 0; c < k; ++c)
        result.reservoir.offer(collect[c].collected[static_cast<std::size_t>(s)], reservoir_rng);

    auto summarize = [&](const std::vector<HalfStats>& h, int steps, const char* prefix) {
      double acc = 0.0, prob = 0.0;
      std::size_t div = 0;
      for (const auto& s : h) {
        acc += s.accepted;
        prob += s.accept_prob;
        div += s.divergences;
      }
      const double total = static_cast<double>(std::max(1, steps)) * static_cast<double>(k);
      record[std::string(prefix) + "_accept_rate"] = acc / total;
      record[std::string(prefix) + "_accept_prob"] = prob / total;
      record[std::string(prefix) + "_divergences"] = div;
    };
    summarize(tune, tune_steps, "tune");
    summarize(collect, collect_steps, "collect");
    record["step_sizes"] = ensemble.step_sizes;
    record["reservoir_size"] = result.reservoir.size();
    record["reservoir_seen"] = result.reservoir.seen();

    if (cycle < config.cycles) {
      const PreconditionerKind next_kind =
          config.kind == PreconditionerKind::Identity ? PreconditionerKind::Identity
          : cycle == 1                                ? PreconditionerKind::Diagonal
                                                      : config.kind;
      nlohmann::json fit;
      try {
        const Matrix data = result.reservoir.matrix();
        BijectionPtr next = fit_preconditioner(next_kind, data, config,
                                               seed + 0x9e3779b9ULL * static_cast<std::uint64_t>(cycle),
                                               fit_state, fit);
        remap_chains(ensemble, precond, *next);
        result.preconditioner = std::move(next);
      } catch (const std::exception& ex) {
        fit["fallback"] = std::string("kept previous preconditioner: ") + ex.what();
        warn("warmup cycle " + std::to_string(cycle) + ": " + ex.what());
      }
      record["fit"] = fit;
    }
    result.log.push_back(std::move(record));
  }
  samplers::refresh(ensemble, samplers::latent_density(*result.preconditioner, target));
  return result;
}

Draws run_sampling(ChainEnsemble& ensemble, const Bijection& preconditioner,
                   const targets::TargetModel& target, const samplers::SamplerConfig& sampler,
                   int iterations, unsigned workers, SamplingStats* stats) {
  if (iterations < 1) throw std::invalid_argument("run_sampling: iterations must be >= 1");
  const LogDensityFn fn = samplers::latent_density(preconditioner, target);
  samplers::refresh(ensemble, fn);
  const std::size_t k = ensemble.size();
  Draws draws(k, Matrix(iterations, ensemble.dim()));
  std::vector<double> prob(k, 0.0);
  std::vector<std::size_t> div(k, 0), depth_hits(k, 0);
  parallel_for(k, workers, [&](std::size_t c) {
    auto& chain = ensemble.chains[c];
    for (int t = 0; t < iterations; ++t) {
      const auto info = samplers::transition(chain, ensemble.step_sizes[c], sampler, fn,
                                             ensemble.rngs[c]);
      prob[c] += info.accept_prob;
      div[c] += info.divergent ? 1 : 0;
      if (sampler.kind == samplers::SamplerKind::Nuts && info.tree_depth >= sampler.max_depth)
        ++depth_hits[c];
      draws[c].row(t) = preconditioner.inverse_point(chain.z).transpose();
    }
  });
  if (stats) {
    double p = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      p += prob[c];
      stats->divergences += div[c];
      stats->max_depth_hits += depth_hits[c];
    }
    stats->accept_rate = p / (static_cast<double>(k) * iterations);
  }
  return draws;
}

}  // namespace flowprec::warmup
