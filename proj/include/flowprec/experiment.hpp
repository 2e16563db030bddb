#ifndef FLOWPREC_EXPERIMENT_HPP
#define FLOWPREC_EXPERIMENT_HPP

#include "flowprec/diagnostics.hpp"
#include "flowprec/warmup.hpp"

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowprec::experiment {

/// Invalid configuration; `field` names the offending key path.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct TargetSpec {
  std::string name;     // funnel, banana, sgc, sgc-funnel, radon
  std::string data;     // dataset path (sgc, sgc-funnel, radon)
  Index rows = -1;      // keep the first `rows` records; -1 keeps all
  std::string variant = "vs";  // radon only

  std::string label() const;
};

struct ExperimentConfig {
  std::vector<TargetSpec> targets;  // one entry per dataset size
  std::vector<warmup::PreconditionerKind> preconditioners;
  std::vector<samplers::SamplerKind> samplers;
  std::vector<std::uint64_t> seeds;
  warmup::WarmupConfig warmup;  // kind and sampler kind are set per cell
  int iterations = 1000;
  bool compute_ksd = true;
  diagnostics::KsdConfig ksd;
  std::string output_dir = "flowprec_out";
  bool store_draws = false;
  int histogram_bins = 100;
  unsigned jobs = 1;
  nlohmann::json source;  // effective configuration, hashed into headers
};

/// Parses and validates a configuration object. Unknown keys are rejected.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

/// Applies --seed / --out style overrides and refreshes `source`.
void override_seed(ExperimentConfig& config, std::uint64_t seed);
void override_output(ExperimentConfig& config, const std::string& dir);

struct Cell {
  TargetSpec target;
  warmup::PreconditionerKind preconditioner;
  samplers::SamplerKind sampler;
  std::uint64_t seed;

  /// Relative output directory, unique per cell.
  std::string path() const;
};

/// Grid in (target, preconditioner, sampler, seed) order.
std::vector<Cell> expand(const ExperimentConfig& config);

std::unique_ptr<targets::TargetModel> make_target(const TargetSpec& spec);

struct CellResult {
  Cell cell;
  bool ok = false;
  std::string error;
  diagnostics::EssReport ess;
  double ksd = std::numeric_limits<double>::quiet_NaN();
  std::size_t gaussian_dims = 0;  // |G| of the final preconditioner
  std::vector<Index> gaussian_set;
  double accept_rate = 0.0;
  std::size_t divergences = 0;
  double x0_mean = 0.0;
  double x0_negative = 0.0;      // fraction of draws with x0 < 0
  double x0_abs_gt_20 = 0.0;     // fraction with |x0| > 20
  Draws draws;
  std::vector<nlohmann::json> warmup_log;
  nlohmann::json preconditioner;
};

/// Warmup, sampling and diagnostics for one cell. Exceptions are caught and
/// reported through `ok` / `error`.
CellResult run_cell(const ExperimentConfig& config, const Cell& cell);

std::string metrics_header();
std::string metrics_row(const CellResult& result);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& bytes);
std::string config_hash(const ExperimentConfig& config);
std::string version();

/// Writes metrics.csv, warmup.jsonl, preconditioner.json, histogram_dim0.csv
/// and optionally draws.csv.gz into `dir`.
void write_cell_outputs(const ExperimentConfig& config, const CellResult& result,
                        const std::string& dir);

/// Runs every cell (up to config.jobs at once) and writes the per-cell
/// artifacts plus an aggregated metrics.csv. Returns the number of failed
/// cells.
std::size_t run(const ExperimentConfig& config, std::ostream& log);

}  // namespace flowprec::experiment

#endif  // FLOWPREC_EXPERIMENT_HPP
